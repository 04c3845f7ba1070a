#include "instcal/segnet.hpp"

#include <cmath>

#include "instcal/ops.hpp"
#include "instcal/rng.hpp"

namespace instcal {
namespace {

constexpr std::array<std::size_t, 4> kStageStride{1, 2, 2, 1};
constexpr std::array<std::size_t, 4> kStageUpsample{1, 1, 1, 2};
constexpr std::size_t kClassifierUpsample = 2;

template <typename T>
constexpr bool holds(const NormVariant& v) {
  return std::holds_alternative<T>(v);
}

ConvLayer make_conv(std::size_t in, std::size_t out, std::size_t stride, std::size_t upsample, Rng& rng) {
  ConvLayer c;
  c.stride = stride;
  c.upsample_before = upsample;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * 9));
  c.weight = Tensor({out, in, 3, 3});
  for (Real& v : c.weight.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
  c.bias = Tensor({out});
  for (Real& v : c.bias.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
  return c;
}

// Calls f(name, tensor, trainable, is_basis) for every stored tensor in a
// fixed order.
template <typename Self, typename F>
void visit_tensors(Self& net, F&& f) {
  const bool plain = !net.converted();
  const bool calibrates = holds<InstCalU>(net.variant()) || holds<InstCalC>(net.variant());
  for (std::size_t i = 0; i < net.convs().size(); ++i) {
    const bool classifier = i + 1 == net.convs().size();
    const std::string conv = classifier ? "classifier" : "conv" + std::to_string(i);
    auto& layer = net.convs()[i];
    f(conv + ".weight", layer.weight, plain, false);
    f(conv + ".bias", layer.bias, plain, false);
    if (classifier) break;
    auto& norm = net.norms()[i];
    const std::string p = "norm" + std::to_string(i);
    f(p + ".gamma", norm.state.gamma, plain, false);
    f(p + ".beta", norm.state.beta, plain, false);
    f(p + ".mu_pop", norm.state.mu_pop, false, false);
    f(p + ".var_pop", norm.state.var_pop, false, false);
    if (holds<InstCalU>(norm.variant)) {
      f(p + ".m_mu", norm.u.m_mu, calibrates, false);
      f(p + ".m_sigma", norm.u.m_sigma, calibrates, false);
    } else if (holds<InstCalC>(norm.variant)) {
      f(p + ".basis_mu", norm.c.basis_mu, calibrates, true);
      f(p + ".basis_sigma", norm.c.basis_sigma, calibrates, true);
      for (auto [tag, mlp] : {std::pair{"mlp_mu", &norm.c.mlp_mu}, std::pair{"mlp_sigma", &norm.c.mlp_sigma}}) {
        const std::string m = p + "." + tag;
        f(m + ".w1", mlp->w1, calibrates, false);
        f(m + ".b1", mlp->b1, calibrates, false);
        f(m + ".w2", mlp->w2, calibrates, false);
        f(m + ".b2", mlp->b2, calibrates, false);
      }
    }
  }
}

Var leaf_or_constant(Graph& g, const Tensor& t, bool trainable, const std::string& name, Tensor* storage,
                     std::vector<BoundParam>& params) {
  if (!trainable) return g.constant(t);
  Var v = g.leaf(t, true);
  params.push_back(BoundParam{name, storage, v});
  return v;
}

void bind_mlp_params(Graph& g, Mlp& mlp, const std::string& prefix, bool trainable, MlpVars& out,
                     std::vector<BoundParam>& params) {
  out.w1 = leaf_or_constant(g, mlp.w1, trainable, prefix + ".w1", &mlp.w1, params);
  out.b1 = leaf_or_constant(g, mlp.b1, trainable, prefix + ".b1", &mlp.b1, params);
  out.w2 = leaf_or_constant(g, mlp.w2, trainable, prefix + ".w2", &mlp.w2, params);
  out.b2 = leaf_or_constant(g, mlp.b2, trainable, prefix + ".b2", &mlp.b2, params);
}

}  // namespace

std::string variant_name(const NormVariant& v) {
  if (holds<PlainBN>(v)) return "plain";
  if (holds<ManualM>(v)) return "manual";
  if (holds<InstCalU>(v)) return "instcal-u";
  return "instcal-c";
}

nlohmann::json variant_to_json(const NormVariant& v) {
  nlohmann::json j = {{"kind", variant_name(v)}};
  if (const auto* m = std::get_if<ManualM>(&v)) j["m"] = m->m;
  if (const auto* c = std::get_if<InstCalC>(&v)) j["basis_count"] = c->basis_count;
  return j;
}

NormVariant variant_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "plain") return PlainBN{};
  if (kind == "manual") return ManualM{j.at("m").get<Real>()};
  if (kind == "instcal-u") return InstCalU{};
  if (kind == "instcal-c") return InstCalC{j.value("basis_count", kDefaultBasisCount)};
  throw std::invalid_argument("unknown norm variant '" + kind + "'");
}

void SegNetConfig::validate() const {
  if (widths.size() != 4) throw std::invalid_argument("segnet expects exactly 4 stage widths");
  for (std::size_t w : widths) {
    if (w == 0) throw std::invalid_argument("stage widths must be positive");
  }
  if (in_channels == 0 || n_classes < 2) throw std::invalid_argument("need input channels and at least 2 classes");
  if (mlp_hidden == 0) throw std::invalid_argument("mlp_hidden must be positive");
}

void to_json(nlohmann::json& j, const SegNetConfig& c) {
  j = {{"widths", c.widths}, {"in_channels", c.in_channels}, {"n_classes", c.n_classes}, {"mlp_hidden", c.mlp_hidden}};
}

void from_json(const nlohmann::json& j, SegNetConfig& c) {
  c = SegNetConfig{};
  c.widths = j.value("widths", c.widths);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
}

SegNet SegNet::build(const SegNetConfig& config, std::uint64_t seed) {
  config.validate();
  SegNet net;
  net.config_ = config;
  Rng rng(seed);
  std::size_t in = config.in_channels;
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    net.convs_.push_back(make_conv(in, config.widths[s], kStageStride[s], kStageUpsample[s], rng));
    NormLayer norm;
    norm.state = NormLayerState::fresh(config.widths[s]);
    net.norms_.push_back(std::move(norm));
    in = config.widths[s];
  }
  net.convs_.push_back(make_conv(in, config.n_classes, 1, kClassifierUpsample, rng));
  return net;
}

const NormVariant& SegNet::variant() const {
  static const NormVariant plain = PlainBN{};
  return norms_.empty() ? plain : norms_.front().variant;
}

bool SegNet::converted() const { return !holds<PlainBN>(variant()); }

void SegNet::convert(const NormVariant& target, std::uint64_t seed) {
  if (norms_.empty()) throw ConversionError("model has no BatchNorm layers to convert");
  if (converted()) throw ConversionError("model is already converted (" + variant_name(variant()) + ")");
  if (holds<PlainBN>(target)) throw ConversionError("conversion target must be a calibrated variant");
  for (std::size_t i = 0; i < norms_.size(); ++i) {
    NormLayer& n = norms_[i];
    n.variant = target;
    n.state.mode = NormMode::Eval;
    const std::size_t c = n.state.channels();
    if (holds<InstCalU>(target)) n.u = CalibrationU::constant(c);
    if (const auto* k = std::get_if<InstCalC>(&target)) {
      n.c = CalibrationC::initialized(c, k->basis_count, config_.mlp_hidden, mix_seed(seed, i));
    }
  }
}

std::vector<NamedTensor> SegNet::named_tensors() {
  std::vector<NamedTensor> out;
  visit_tensors(*this, [&](const std::string& name, Tensor& t, bool trainable, bool) {
    out.push_back(NamedTensor{name, &t, trainable});
  });
  return out;
}

std::vector<std::string> SegNet::trainable_names() const {
  std::vector<std::string> out;
  visit_tensors(*this, [&](const std::string& name, const Tensor&, bool trainable, bool) {
    if (trainable) out.push_back(name);
  });
  return out;
}

std::size_t SegNet::parameter_count() const {
  std::size_t n = 0;
  visit_tensors(*this, [&](const std::string& name, const Tensor& t, bool, bool) {
    if (name.ends_with(".mu_pop") || name.ends_with(".var_pop")) return;
    n += t.numel();
  });
  return n;
}

Checkpoint SegNet::to_checkpoint() const {
  Checkpoint ck;
  ck.metadata = {{"model", config_}, {"variant", variant_to_json(variant())}};
  if (!norms_.empty()) {
    ck.metadata["momentum"] = norms_.front().state.momentum;
    ck.metadata["epsilon"] = norms_.front().state.epsilon;
  }
  visit_tensors(*this, [&](const std::string& name, const Tensor& t, bool trainable, bool basis) {
    if (!basis) {
      ck.add(name, t, trainable);
      return;
    }
    const std::size_t width = t.dim(1);
    for (std::size_t k = 0; k < t.dim(0); ++k) {
      Tensor row({width});
      for (std::size_t c = 0; c < width; ++c) row[c] = t[k * width + c];
      ck.add(name + "." + std::to_string(k), std::move(row), trainable);
    }
  });
  return ck;
}

SegNet SegNet::from_checkpoint(const Checkpoint& ck) {
  if (!ck.metadata.contains("model")) throw CheckpointError("checkpoint has no model metadata");
  SegNet net = build(ck.metadata.at("model").get<SegNetConfig>(), 0);
  const NormVariant v = variant_from_json(ck.metadata.value("variant", nlohmann::json{{"kind", "plain"}}));
  if (!holds<PlainBN>(v)) net.convert(v, 0);
  const Real momentum = ck.metadata.value("momentum", kDefaultMomentum);
  const Real epsilon = ck.metadata.value("epsilon", kDefaultEpsilon);
  for (NormLayer& n : net.norms_) {
    n.state.momentum = momentum;
    n.state.epsilon = epsilon;
    n.state.mode = NormMode::Eval;
  }
  visit_tensors(net, [&](const std::string& name, Tensor& t, bool, bool basis) {
    if (!basis) {
      const ArrayEntry& e = ck.at(name);
      if (e.tensor.shape() != t.shape()) {
        throw CheckpointError("array '" + name + "' has shape " + to_string(e.tensor.shape()) + ", expected " +
                              to_string(t.shape()));
      }
      t = e.tensor;
      return;
    }
    const std::size_t width = t.dim(1);
    for (std::size_t k = 0; k < t.dim(0); ++k) {
      const ArrayEntry& e = ck.at(name + "." + std::to_string(k));
      if (e.tensor.shape() != Shape{width}) throw CheckpointError("basis row '" + e.name + "' has the wrong shape");
      for (std::size_t c = 0; c < width; ++c) t[k * width + c] = e.tensor[c];
    }
  });
  return net;
}

ForwardResult SegNet::forward(Graph& g, const Tensor& images, const ForwardOptions& options) {
  if (images.rank() != 4 || images.dim(1) != config_.in_channels) {
    throw DimensionError("segnet expects N x " + std::to_string(config_.in_channels) + " x H x W input, got " +
                         to_string(images.shape()));
  }
  ForwardResult result;
  auto& params = result.params;
  const bool backbone = options.trainable == Trainable::Backbone;
  const bool calibration = options.trainable == Trainable::Calibration;
  const bool affine = backbone || options.trainable == Trainable::Affine;
  std::vector<std::pair<std::size_t, BatchStats>> pending;

  Var h = g.constant(images);
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const bool classifier = i + 1 == convs_.size();
    const std::string conv_name = classifier ? "classifier" : "conv" + std::to_string(i);
    try {
      ConvLayer& conv = convs_[i];
      if (conv.upsample_before > 1) h = upsample_nearest(h, conv.upsample_before);
      Var w = leaf_or_constant(g, conv.weight, backbone, conv_name + ".weight", &conv.weight, params);
      Var b = leaf_or_constant(g, conv.bias, backbone, conv_name + ".bias", &conv.bias, params);
      h = conv2d(h, w, b, conv.stride, 1);
      if (classifier) break;

      NormLayer& n = norms_[i];
      const std::string p = "norm" + std::to_string(i);
      NormVars nv;
      nv.mu_pop = g.constant(n.state.mu_pop);
      nv.var_pop = g.constant(n.state.var_pop);
      nv.gamma = leaf_or_constant(g, n.state.gamma, affine, p + ".gamma", &n.state.gamma, params);
      nv.beta = leaf_or_constant(g, n.state.beta, affine, p + ".beta", &n.state.beta, params);
      nv.epsilon = n.state.epsilon;
      if (holds<PlainBN>(n.variant)) {
        if (options.mode == NormMode::Train) {
          BatchStats stats;
          h = norm_batch(h, nv, &stats);
          pending.emplace_back(i, std::move(stats));
        } else {
          h = norm_population(h, nv);
        }
      } else if (const auto* m = std::get_if<ManualM>(&n.variant)) {
        h = norm_manual(h, nv, m->m, options.scope);
      } else if (holds<InstCalU>(n.variant)) {
        Var m_mu = leaf_or_constant(g, n.u.m_mu, calibration, p + ".m_mu", &n.u.m_mu, params);
        Var m_sigma = leaf_or_constant(g, n.u.m_sigma, calibration, p + ".m_sigma", &n.u.m_sigma, params);
        h = norm_instcal_u(h, nv, m_mu, m_sigma, options.scope);
      } else {
        CalibrationCVars cv;
        cv.basis_mu = leaf_or_constant(g, n.c.basis_mu, calibration, p + ".basis_mu", &n.c.basis_mu, params);
        cv.basis_sigma =
            leaf_or_constant(g, n.c.basis_sigma, calibration, p + ".basis_sigma", &n.c.basis_sigma, params);
        bind_mlp_params(g, n.c.mlp_mu, p + ".mlp_mu", calibration, cv.mlp_mu, params);
        bind_mlp_params(g, n.c.mlp_sigma, p + ".mlp_sigma", calibration, cv.mlp_sigma, params);
        h = norm_instcal_c(h, nv, cv, options.scope);
      }
      h = relu(h);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("non-finite value in segnet layer " + std::to_string(i) + " (" + conv_name +
                           "): " + e.what());
    }
  }
  for (auto& [i, stats] : pending) update_population(norms_[i].state, stats);
  result.logits = h;
  return result;
}

Tensor SegNet::infer(const Tensor& images, StatsScope scope) const {
  Graph g(false);
  // Eval mode with no trainable tensors reads the model only.
  return const_cast<SegNet*>(this)->forward(g, images, ForwardOptions{NormMode::Eval, scope, Trainable::None}).logits.value();
}

bool is_calibration_name(const std::string& name) {
  for (const char* tag : {".m_mu", ".m_sigma", ".basis_mu.", ".basis_sigma.", ".basis_mu", ".basis_sigma", ".mlp_mu.",
                          ".mlp_sigma."}) {
    if (name.find(tag) != std::string::npos) return true;
  }
  return false;
}

}  // namespace instcal
