#include "instcal/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

#include "instcal/ops.hpp"
#include "instcal/rng.hpp"

namespace instcal {
namespace {

constexpr std::uint64_t kPretrainStream = 0x5052;
constexpr std::uint64_t kCalibrationStream = 0xCA1;
constexpr std::uint64_t kInitTag = 0xB0;
constexpr std::uint64_t kAugmentTag = 0xA0;

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

Batch stack(const std::vector<Sample>& samples) {
  const Shape& s = samples.front().image.shape();
  const std::size_t per = samples.front().image.numel();
  Batch b{Tensor({samples.size(), s[0], s[1], s[2]}), {}};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy(samples[i].image.data().begin(), samples[i].image.data().end(),
              b.images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    b.labels.insert(b.labels.end(), samples[i].mask.labels.begin(), samples[i].mask.labels.end());
  }
  return b;
}

std::string m_label(double m) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "manual-%g", m);
  return buf;
}

// Shared SGD loop for both training stages.
void run_training(SegNet& model, const TrainConfig& config, const SceneConfig& scene, std::uint64_t stream,
                  Trainable trainable, NormMode mode, std::vector<CurvePoint>& curve, const ProgressFn& progress) {
  const auto names = model.trainable_names();
  Sgd sgd(config.momentum, config.weight_decay, {names.begin(), names.end()});
  curve.reserve(config.total_iters);
  for (std::size_t it = 0; it < config.total_iters; ++it) {
    std::vector<Sample> samples;
    for (std::size_t slot = 0; slot < config.batch_size; ++slot) {
      samples.push_back(training_sample(config, scene, stream, it, slot));
    }
    const Batch batch = stack(samples);
    const double lr = poly_lr(it, config.total_iters, config.lr, config.poly_power);
    double loss_value = 0;
    try {
      Graph g;
      ForwardResult fwd = model.forward(g, batch.images, ForwardOptions{mode, StatsScope::Instance, trainable});
      Var loss = cross_entropy_seg(fwd.logits, batch.labels, kIgnoreLabel);
      loss_value = static_cast<double>(loss.value().item());
      g.backward(loss);
      sgd.step(g, fwd.params, lr);
    } catch (const NonFiniteError& e) {
      throw DivergenceError(it, e.what());
    }
    curve.push_back(CurvePoint{it, lr, loss_value});
    if (progress) progress(curve.back());
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be finite and non-negative");
  if (!(poly_power > 0)) throw std::invalid_argument("poly_power must be positive");
  if (total_iters < 1) throw std::invalid_argument("total_iters must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight_decay must be non-negative");
  if (augmentation == DomainKind::Corruption) {
    throw std::invalid_argument("augmentation must not be a target-domain corruption");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"poly_power", c.poly_power},
       {"total_iters", c.total_iters},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"augmentation", to_string(c.augmentation)},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.at("lr").get<double>();
  c.poly_power = j.at("poly_power").get<double>();
  c.total_iters = j.at("total_iters").get<std::size_t>();
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.augmentation = parse_domain_kind(j.at("augmentation").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
}

double poly_lr(std::size_t iter, std::size_t total, double base_lr, double power) {
  if (total == 0) throw std::invalid_argument("poly_lr: total must be positive");
  if (iter > total) throw std::invalid_argument("poly_lr: iter exceeds total");
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(total), power);
}

Sgd::Sgd(double momentum, double weight_decay, std::set<std::string> allowed)
    : momentum_(momentum), weight_decay_(weight_decay), allowed_(std::move(allowed)) {}

void Sgd::step(const Graph& g, const std::vector<BoundParam>& params, double lr) {
  for (const BoundParam& p : params) {
    if (!allowed_.count(p.name)) throw FrozenTensorError("attempt to update frozen tensor '" + p.name + "'");
  }
  const auto rlr = static_cast<Real>(lr);
  const auto mom = static_cast<Real>(momentum_);
  const auto wd = static_cast<Real>(weight_decay_);
  for (const BoundParam& p : params) {
    Tensor& w = *p.tensor;
    auto [it, fresh] = velocity_.try_emplace(p.name, w.shape());
    Tensor& v = it->second;
    const bool has_grad = g.has_grad(p.var);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const Real grad = (has_grad ? g.grad(p.var)[i] : Real(0)) + wd * w[i];
      v[i] = fresh ? grad : mom * v[i] + grad;
      w[i] -= rlr * v[i];
    }
  }
}

Sample weak_augment(const Sample& s, std::uint64_t seed) {
  Rng rng(seed);
  const bool flip = rng.bernoulli(0.5);
  const double scale = rng.uniform(1.0, 1.25);
  const std::size_t h = s.mask.height;
  const std::size_t w = s.mask.width;
  const double extra_y = static_cast<double>(h) * (scale - 1);
  const double extra_x = static_cast<double>(w) * (scale - 1);
  const double oy = rng.uniform(0, extra_y);
  const double ox = rng.uniform(0, extra_x);
  Sample out = s;
  for (std::size_t y = 0; y < h; ++y) {
    const auto sy = std::min(h - 1, static_cast<std::size_t>((static_cast<double>(y) + oy) / scale));
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t fx = flip ? w - 1 - x : x;
      const auto sx = std::min(w - 1, static_cast<std::size_t>((static_cast<double>(fx) + ox) / scale));
      out.mask.at(y, x) = s.mask.at(sy, sx);
      for (std::size_t c = 0; c < 3; ++c) out.image[(c * h + y) * w + x] = s.image[(c * h + sy) * w + sx];
    }
  }
  return out;
}

Sample training_sample(const TrainConfig& config, const SceneConfig& scene, std::uint64_t stream_tag,
                       std::size_t iter, std::size_t slot) {
  const std::uint64_t index = mix_seed(stream_tag, iter * config.batch_size + slot);
  const std::uint64_t seed = scene_seed(config.seed, Split::Train, index);
  Sample s = weak_augment(generate_scene(seed, scene), mix_seed(seed, kAugmentTag));
  if (config.augmentation == DomainKind::Identity) return s;
  return with_domain(s, DomainSpec::augmentation(config.augmentation, mix_seed(config.seed, stream_tag)));
}

SegNet initial_model(const SegNetConfig& model_config, const TrainConfig& config) {
  return SegNet::build(model_config, mix_seed(config.seed, kInitTag));
}

TrainResult pretrain(const SegNetConfig& model_config, const TrainConfig& config, const SceneConfig& scene,
                     const ProgressFn& progress) {
  config.validate();
  TrainResult r{initial_model(model_config, config), {}};
  run_training(r.model, config, scene, kPretrainStream, Trainable::Backbone, NormMode::Train, r.curve, progress);
  for (NormLayer& n : r.model.norms()) n.state.mode = NormMode::Eval;
  return r;
}

TrainResult train_instcal(SegNet model, const TrainConfig& config, const SceneConfig& scene,
                          const ProgressFn& progress) {
  config.validate();
  const NormVariant& v = model.variant();
  if (!std::holds_alternative<InstCalU>(v) && !std::holds_alternative<InstCalC>(v)) {
    throw std::invalid_argument("train_instcal needs a model converted to instcal-u or instcal-c, got " +
                                variant_name(v));
  }
  TrainResult r{std::move(model), {}};
  run_training(r.model, config, scene, kCalibrationStream, Trainable::Calibration, NormMode::Eval, r.curve,
               progress);
  return r;
}

Prediction predict(const Tensor& logits, std::size_t index) {
  const std::size_t classes = logits.dim(1);
  const std::size_t h = logits.dim(2);
  const std::size_t w = logits.dim(3);
  const std::size_t plane = h * w;
  const Real* base = logits.data().data() + index * classes * plane;
  Prediction p{LabelMask{h, w, std::vector<int>(plane)}, std::vector<double>(plane)};
  for (std::size_t i = 0; i < plane; ++i) {
    std::size_t best = 0;
    double top = static_cast<double>(base[i]);
    for (std::size_t c = 1; c < classes; ++c) {
      const auto v = static_cast<double>(base[c * plane + i]);
      if (v > top) {
        top = v;
        best = c;
      }
    }
    double z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(base[c * plane + i]) - top);
    p.labels.labels[i] = static_cast<int>(best);
    p.confidence[i] = 1.0 / z;
  }
  return p;
}

void EvalAccumulator::add(const Tensor& logits, const std::vector<const LabelMask*>& masks) {
  if (logits.rank() != 4 || logits.dim(0) != masks.size()) throw DimensionError("logits/mask count mismatch");
  for (std::size_t n = 0; n < masks.size(); ++n) {
    const Prediction p = predict(logits, n);
    const LabelMask& truth = *masks[n];
    confusion.add(p.labels.labels, truth.labels, kIgnoreLabel);
    for (std::size_t i = 0; i < truth.labels.size(); ++i) {
      if (truth.labels[i] == kIgnoreLabel) continue;
      bins.add(p.confidence[i], p.labels.labels[i] == truth.labels[i]);
    }
  }
}

void EvalAccumulator::merge(const EvalAccumulator& other) {
  confusion.merge(other.confusion);
  bins.merge(other.bins);
}

Sample evaluation_sample(const EvalConfig& config, const DomainSpec& domain, std::size_t index) {
  return with_domain(generate_scene(scene_seed(config.seed, Split::Test, index), config.scene), domain);
}

MetricsReport evaluate_domain(const Predictor& predictor, const DomainSpec& domain, const EvalConfig& config,
                              const std::string& method, const std::string& config_hash) {
  std::vector<EvalAccumulator> parts(config.n_images, EvalAccumulator(kNumClasses, config.n_bins));
  parallel_for(config.n_images, config.workers, [&](std::size_t i) {
    const Sample s = evaluation_sample(config, domain, i);
    const Tensor logits = predictor(s.image.reshaped({1, 3, s.mask.height, s.mask.width}));
    parts[i].add(logits, {&s.mask});
  });
  EvalAccumulator total(kNumClasses, config.n_bins);
  for (const EvalAccumulator& p : parts) total.merge(p);
  MetricsReport r;
  r.method = method;
  r.domain = domain;
  r.per_class_iou = total.confusion.per_class_iou();
  r.miou = total.confusion.miou();
  r.ece = total.bins.ece();
  r.n_images = config.n_images;
  r.config_hash = config_hash;
  return r;
}

std::vector<MetricsReport> evaluate(const SegNet& model, const std::vector<DomainSpec>& domains,
                                    const EvalConfig& config, const std::string& method,
                                    const std::string& config_hash) {
  const Predictor predictor = [&](const Tensor& images) { return model.infer(images); };
  std::vector<MetricsReport> out;
  for (const DomainSpec& d : domains) out.push_back(evaluate_domain(predictor, d, config, method, config_hash));
  return out;
}

std::vector<double> default_m_values() {
  std::vector<double> m;
  for (int i = 0; i <= 10; ++i) m.push_back(i / 10.0);
  return m;
}

std::vector<SweepRow> sweep_manual_m(const SegNet& plain, const std::vector<DomainSpec>& domains,
                                     const std::vector<double>& m_values, const EvalConfig& config,
                                     const std::string& config_hash) {
  if (plain.converted()) throw std::invalid_argument("sweep_manual_m needs an unconverted (plain BN) model");
  std::vector<SweepRow> rows;
  for (double m : m_values) {
    SegNet model = plain;
    model.convert(ManualM{static_cast<Real>(m)}, 0);
    for (MetricsReport& r : evaluate(model, domains, config, m_label(m), config_hash)) {
      rows.push_back(SweepRow{m, std::move(r)});
    }
  }
  return rows;
}

std::vector<BatchStatsRow> batch_stats_experiment(const SegNet& model, const std::vector<DomainSpec>& domains,
                                                  const std::vector<std::size_t>& batch_sizes,
                                                  const EvalConfig& config) {
  if (domains.empty()) throw std::invalid_argument("batch_stats_experiment needs at least one domain");
  std::vector<BatchStatsRow> rows;
  for (std::size_t b : batch_sizes) {
    if (b == 0) throw std::invalid_argument("batch size must be positive");
    const std::size_t n_batches = (config.n_images + b - 1) / b;
    std::vector<EvalAccumulator> parts(n_batches, EvalAccumulator(kNumClasses, config.n_bins));
    parallel_for(n_batches, config.workers, [&](std::size_t k) {
      std::vector<Sample> samples;
      for (std::size_t i = k * b; i < std::min(config.n_images, (k + 1) * b); ++i) {
        samples.push_back(evaluation_sample(config, domains[i % domains.size()], i));
      }
      const Batch batch = stack(samples);
      const Tensor logits = model.infer(batch.images, b == 1 ? StatsScope::Instance : StatsScope::Batch);
      std::vector<const LabelMask*> masks;
      for (const Sample& s : samples) masks.push_back(&s.mask);
      parts[k].add(logits, masks);
    });
    EvalAccumulator total(kNumClasses, config.n_bins);
    for (const EvalAccumulator& p : parts) total.merge(p);
    rows.push_back(BatchStatsRow{b, total.confusion.miou(), total.bins.ece()});
  }
  return rows;
}

Tensor entropy_minimize(const SegNet& model, const Tensor& images, std::size_t steps, double lr) {
  if (steps == 0) return model.infer(images);
  SegNet adapted = model;
  const auto rlr = static_cast<Real>(lr);
  for (std::size_t s = 0; s < steps; ++s) {
    Graph g;
    ForwardResult fwd = adapted.forward(g, images, ForwardOptions{NormMode::Eval, StatsScope::Instance, Trainable::Affine});
    g.backward(mean_entropy(fwd.logits));
    for (const BoundParam& p : fwd.params) {
      if (!g.has_grad(p.var)) continue;
      const Tensor& grad = g.grad(p.var);
      for (std::size_t i = 0; i < p.tensor->numel(); ++i) (*p.tensor)[i] -= rlr * grad[i];
    }
  }
  return adapted.infer(images);
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::min(std::max<std::size_t>(workers, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace instcal
