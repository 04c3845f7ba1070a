#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "instcal/harness.hpp"
#include "instcal/ops.hpp"
#include "instcal/rng.hpp"

using namespace instcal;

namespace {

TrainConfig short_config(std::size_t iters, double lr, std::size_t batch = 1) {
  TrainConfig c;
  c.total_iters = iters;
  c.lr = lr;
  c.batch_size = batch;
  c.seed = 5;
  return c;
}

// Briefly pretrained so that running statistics and weights are meaningful.
const SegNet& base_model() {
  static const SegNet model = pretrain({}, short_config(30, 0.05, 4)).model;
  return model;
}

SegNet converted(const NormVariant& v) {
  SegNet m = base_model();
  m.convert(v, 1);
  return m;
}

EvalConfig small_eval(std::size_t n = 6) {
  EvalConfig c;
  c.n_images = n;
  c.seed = 3;
  return c;
}

bool same_report(const MetricsReport& a, const MetricsReport& b) {
  return nlohmann::json(a).dump() == nlohmann::json(b).dump();
}

double entropy_of(const Tensor& logits) {
  Graph g(false);
  return static_cast<double>(mean_entropy(g.constant(logits)).value().item());
}

}  // namespace

TEST(PolyLr, Endpoints) {
  EXPECT_DOUBLE_EQ(poly_lr(0, 100, 2.5e-3, 0.9), 2.5e-3);
  EXPECT_DOUBLE_EQ(poly_lr(100, 100, 2.5e-3, 0.9), 0.0);
  EXPECT_NEAR(poly_lr(50, 100, 2.5e-3, 0.9), 1.3397e-3, 5e-8);
  EXPECT_NEAR(poly_lr(2000, 4000, 2.5e-3, 0.9), 2.5e-3 * std::pow(0.5, 0.9), 1e-18);
}

TEST(PolyLr, StrictlyDecreasing) {
  for (double power : {0.3, 0.9, 2.0}) {
    for (std::size_t i = 1; i <= 500; ++i) {
      ASSERT_LT(poly_lr(i, 500, 1.0, power), poly_lr(i - 1, 500, 1.0, power));
    }
  }
}

TEST(PolyLr, Errors) {
  EXPECT_THROW(poly_lr(0, 0, 1.0, 0.9), std::invalid_argument);
  EXPECT_THROW(poly_lr(11, 10, 1.0, 0.9), std::invalid_argument);
}

TEST(TrainConfigTest, ValidationAndJson) {
  TrainConfig c = short_config(12, 0.01);
  c.augmentation = DomainKind::AugMixStyle;
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
  TrainConfig bad = c;
  bad.total_iters = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.lr = -1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.augmentation = DomainKind::Corruption;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  nlohmann::json missing = nlohmann::json(c);
  missing.erase("total_iters");
  EXPECT_THROW(missing.get<TrainConfig>(), nlohmann::json::exception);
}

TEST(Sgd, MomentumAndDecayFollowReferenceUpdate) {
  Tensor w = Tensor::vector({1.0, -2.0});
  Sgd sgd(0.9, 0.1, {"w"});
  double v0 = 0, v1 = 0, r0 = 1.0, r1 = -2.0;
  for (int step = 0; step < 3; ++step) {
    Graph g;
    Var p = g.leaf(w, true);
    g.backward(sum(mul(p, p)));
    sgd.step(g, {BoundParam{"w", &w, p}}, 0.05);
    const double g0 = 2 * r0 + 0.1 * r0, g1 = 2 * r1 + 0.1 * r1;
    v0 = step == 0 ? g0 : 0.9 * v0 + g0;
    v1 = step == 0 ? g1 : 0.9 * v1 + g1;
    r0 -= 0.05 * v0;
    r1 -= 0.05 * v1;
    EXPECT_NEAR(w[0], r0, 1e-14);
    EXPECT_NEAR(w[1], r1, 1e-14);
  }
}

TEST(Sgd, RefusesFrozenTensor) {
  Tensor w = Tensor::vector({1.0});
  Sgd sgd(0.9, 0.0, {"allowed"});
  Graph g;
  Var p = g.leaf(w, true);
  g.backward(sum(p));
  EXPECT_THROW(sgd.step(g, {BoundParam{"conv0.weight", &w, p}}, 0.1), FrozenTensorError);
  EXPECT_EQ(w[0], 1.0);
}

TEST(TrainingData, DeterministicAndConsistent) {
  const TrainConfig c = short_config(10, 0.01, 2);
  const Sample a = training_sample(c, {}, 7, 3, 1);
  const Sample b = training_sample(c, {}, 7, 3, 1);
  EXPECT_TRUE(bitwise_equal(a.image, b.image));
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_FALSE(bitwise_equal(a.image, training_sample(c, {}, 7, 3, 0).image));
  for (Real v : a.image.data()) ASSERT_TRUE(v >= 0 && v <= 1);
}

TEST(TrainingData, WeakAugmentMovesImageAndMaskTogether) {
  // Without strong augmentation every output pixel copies one source pixel,
  // so each pixel's colour still matches its label's palette entry.
  const Palette pal = Palette::standard();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Sample s = weak_augment(generate_scene(seed), seed + 100);
    for (std::size_t i = 0; i < 64 * 64; ++i) {
      const int l = s.mask.labels[i];
      if (l == kBackground) continue;
      for (std::size_t c = 0; c < 3; ++c) {
        ASSERT_LE(std::abs(s.image[c * 4096 + i] - pal.base[static_cast<std::size_t>(l)][c]), pal.shape_jitter + 1e-12);
      }
    }
  }
}

TEST(Pretrain, FirstLossNearUniformBound) {
  const TrainResult r = pretrain({}, short_config(1, 0.05, 2));
  ASSERT_EQ(r.curve.size(), 1u);
  EXPECT_NEAR(r.curve[0].loss, std::log(5.0), 0.2);
  EXPECT_DOUBLE_EQ(r.curve[0].lr, 0.05);
}

TEST(Pretrain, OneIterationTouchesOnlyLearnedState) {
  const TrainConfig c = short_config(1, 0.05, 2);
  const Checkpoint init = initial_model({}, c).to_checkpoint();
  const Checkpoint after = pretrain({}, c).model.to_checkpoint();
  const auto changed = changed_arrays(init, after);
  EXPECT_FALSE(changed.empty());
  for (const std::string& name : changed) {
    const bool running_stat = name.ends_with(".mu_pop") || name.ends_with(".var_pop");
    EXPECT_TRUE(init.at(name).trainable || running_stat) << name;
  }
}

TEST(Pretrain, DeterministicAndReducesLoss) {
  const TrainConfig c = short_config(3, 0.05, 2);
  EXPECT_TRUE(pretrain({}, c).model.to_checkpoint().to_bytes() == pretrain({}, c).model.to_checkpoint().to_bytes());
  const auto& curve = pretrain({}, short_config(30, 0.05, 4)).curve;
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    head += curve[i].loss;
    tail += curve[curve.size() - 1 - i].loss;
  }
  EXPECT_LT(tail, head);
}

TEST(TrainInstCal, FreezeContract) {
  for (NormVariant v : {NormVariant{InstCalU{}}, NormVariant{InstCalC{4}}}) {
    const SegNet start = converted(v);
    const TrainResult r = train_instcal(start, short_config(5, 0.05));
    const auto changed = changed_arrays(start.to_checkpoint(), r.model.to_checkpoint());
    EXPECT_FALSE(changed.empty()) << variant_name(v);
    for (const std::string& name : changed) EXPECT_TRUE(is_calibration_name(name)) << name;
  }
}

TEST(TrainInstCal, CoefficientNetworksReceiveGradient) {
  const SegNet start = converted(InstCalC{4});
  const Checkpoint after = train_instcal(start, short_config(5, 0.05)).model.to_checkpoint();
  const auto changed = changed_arrays(start.to_checkpoint(), after);
  for (const char* suffix : {".mlp_mu.w2", ".mlp_sigma.w2", ".basis_mu.0", ".basis_mu.3"}) {
    const std::string name = std::string("norm1") + suffix;
    EXPECT_NE(std::find(changed.begin(), changed.end(), name), changed.end()) << name;
  }
  double largest = 0;
  for (Real v : after.at("norm1.mlp_mu.w2").tensor.data()) largest = std::max(largest, std::abs(double(v)));
  EXPECT_GT(largest, 1e-8);
}

TEST(TrainInstCal, ZeroLearningRateIsIdentity) {
  const SegNet start = converted(InstCalU{});
  const TrainResult r = train_instcal(start, short_config(3, 0.0));
  EXPECT_TRUE(r.model.to_checkpoint().to_bytes() == start.to_checkpoint().to_bytes());
}

TEST(TrainInstCal, RequiresCalibratedModel) {
  EXPECT_THROW(train_instcal(base_model(), short_config(1, 0.01)), std::invalid_argument);
  EXPECT_THROW(train_instcal(converted(ManualM{0.2}), short_config(1, 0.01)), std::invalid_argument);
}

TEST(TrainInstCal, GoldenFiftyIterationLoss) {
  if constexpr (sizeof(Real) != 8) GTEST_SKIP() << "value pinned for the double build";
  const TrainResult r = train_instcal(converted(InstCalU{}), short_config(50, 2.5e-3));
  ASSERT_EQ(r.curve.size(), 50u);
  EXPECT_NEAR(r.curve.back().loss, 0.38777524616240916, 1e-12);
}

TEST(Evaluate, PureAndRepeatable) {
  const SegNet model = converted(InstCalU{});
  const std::string before = model.to_checkpoint().to_bytes();
  const std::vector<DomainSpec> domains{DomainSpec::identity(), DomainSpec::corrupted("fog", 2)};
  const auto a = evaluate(model, domains, small_eval(), "u", "abc");
  const auto b = evaluate(model, domains, small_eval(), "u", "abc");
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same_report(a[i], b[i]));
  EXPECT_TRUE(model.to_checkpoint().to_bytes() == before);
  EXPECT_EQ(a[1].domain.label(), "fog-2");
  EXPECT_EQ(a[0].n_images, 6u);
  EXPECT_EQ(a[0].config_hash, "abc");
}

TEST(Evaluate, WorkerCountDoesNotChangeReports) {
  const SegNet model = converted(InstCalC{});
  EvalConfig many = small_eval(8);
  many.workers = 3;
  const auto a = evaluate(model, {DomainSpec::corrupted("contrast", 2)}, small_eval(8), "c", "");
  const auto b = evaluate(model, {DomainSpec::corrupted("contrast", 2)}, many, "c", "");
  EXPECT_TRUE(same_report(a[0], b[0]));
}

TEST(Evaluate, ShuffledOrderGivesIdenticalPredictions) {
  const SegNet model = converted(InstCalU{});
  const EvalConfig cfg = small_eval(5);
  const DomainSpec d = DomainSpec::corrupted("gauss_noise", 2, 4);
  std::vector<Tensor> forward_order;
  for (std::size_t i = 0; i < 5; ++i) forward_order.push_back(model.infer(evaluation_sample(cfg, d, i).image.reshaped({1, 3, 64, 64})));
  for (std::size_t k = 0; k < 5; ++k) {
    const std::size_t i = 4 - k;
    const Tensor again = model.infer(evaluation_sample(cfg, d, i).image.reshaped({1, 3, 64, 64}));
    EXPECT_TRUE(bitwise_equal(again, forward_order[i]));
  }
}

TEST(Evaluate, AccumulatorMatchesDirectMetrics) {
  const SegNet model = base_model();
  const EvalConfig cfg = small_eval(3);
  ConfusionMatrix cm(kNumClasses);
  std::vector<double> conf;
  std::vector<bool> correct;
  for (std::size_t i = 0; i < 3; ++i) {
    const Sample s = evaluation_sample(cfg, DomainSpec::identity(), i);
    const Prediction p = predict(model.infer(s.image.reshaped({1, 3, 64, 64})));
    cm.add(p.labels.labels, s.mask.labels, kIgnoreLabel);
    for (std::size_t j = 0; j < p.confidence.size(); ++j) {
      conf.push_back(p.confidence[j]);
      correct.push_back(p.labels.labels[j] == s.mask.labels[j]);
    }
  }
  const MetricsReport r = evaluate(model, {DomainSpec::identity()}, cfg, "plain", "")[0];
  EXPECT_DOUBLE_EQ(r.miou, cm.miou());
  EXPECT_NEAR(r.ece, ece(conf, correct, 15), 1e-12);
}

TEST(SweepManualM, EndpointsAndInitConsistency) {
  const SegNet& plain = base_model();
  const std::vector<DomainSpec> domains{DomainSpec::corrupted("fog", 3)};
  const EvalConfig cfg = small_eval(4);
  const auto rows = sweep_manual_m(plain, domains, {0.0, 0.1, 1.0}, cfg, "");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].report.method, "manual-0");
  EXPECT_EQ(rows[1].report.method, "manual-0.1");
  const MetricsReport pre = evaluate(plain, domains, cfg, "", "")[0];
  EXPECT_DOUBLE_EQ(rows[0].report.miou, pre.miou);
  EXPECT_NEAR(rows[0].report.ece, pre.ece, 1e-12);
  const MetricsReport u0 = evaluate(converted(InstCalU{}), domains, cfg, "", "")[0];
  EXPECT_DOUBLE_EQ(rows[1].report.miou, u0.miou);
  SegNet full = converted(InstCalU{});
  for (NormLayer& n : full.norms()) {
    n.u.m_mu.fill(1);
    n.u.m_sigma.fill(1);
  }
  EXPECT_DOUBLE_EQ(rows[2].report.miou, evaluate(full, domains, cfg, "", "")[0].miou);
  EXPECT_THROW(sweep_manual_m(converted(InstCalU{}), domains, {0.0}, cfg, ""), std::invalid_argument);
}

TEST(SweepManualM, DefaultGrid) {
  const auto m = default_m_values();
  ASSERT_EQ(m.size(), 11u);
  EXPECT_EQ(m.front(), 0.0);
  EXPECT_EQ(m.back(), 1.0);
  EXPECT_DOUBLE_EQ(m[3], 0.3);
}

TEST(BatchStats, BatchOneEqualsEvaluate) {
  const SegNet model = converted(InstCalU{});
  const EvalConfig cfg = small_eval(4);
  const DomainSpec d = DomainSpec::corrupted("contrast", 1);
  const auto rows = batch_stats_experiment(model, {d}, {1, 2, 4}, cfg);
  ASSERT_EQ(rows.size(), 3u);
  const MetricsReport r = evaluate(model, {d}, cfg, "", "")[0];
  EXPECT_EQ(rows[0].batch_size, 1u);
  EXPECT_DOUBLE_EQ(rows[0].miou, r.miou);
  EXPECT_DOUBLE_EQ(rows[0].ece, r.ece);
  EXPECT_THROW(batch_stats_experiment(model, {}, {1}, cfg), std::invalid_argument);
  EXPECT_THROW(batch_stats_experiment(model, {d}, {0}, cfg), std::invalid_argument);
}

TEST(BatchStats, ModelUnchanged) {
  const SegNet model = converted(InstCalC{});
  const std::string before = model.to_checkpoint().to_bytes();
  batch_stats_experiment(model, {DomainSpec::identity(), DomainSpec::corrupted("fog", 1)}, {1, 3}, small_eval(5));
  EXPECT_TRUE(model.to_checkpoint().to_bytes() == before);
}

TEST(EntropyMinimize, ZeroStepsIsPlainInference) {
  const SegNet model = converted(InstCalU{});
  const Tensor x = evaluation_sample(small_eval(), DomainSpec::corrupted("fog", 2), 0).image.reshaped({1, 3, 64, 64});
  EXPECT_TRUE(bitwise_equal(entropy_minimize(model, x, 0, 1e-3), model.infer(x)));
}

TEST(EntropyMinimize, SmallStepLowersEntropyAndLeavesModelUnchanged) {
  const SegNet model = converted(InstCalU{});
  const std::string before = model.to_checkpoint().to_bytes();
  for (std::size_t i = 0; i < 4; ++i) {
    const Tensor x = evaluation_sample(small_eval(), DomainSpec::corrupted("contrast", 2), i).image.reshaped({1, 3, 64, 64});
    const double h0 = entropy_of(model.infer(x));
    for (double lr : {1e-3, 1e-2}) {
      const double h1 = entropy_of(entropy_minimize(model, x, 1, lr));
      EXPECT_LE(h1, h0) << "image " << i << " lr " << lr;
    }
  }
  EXPECT_TRUE(model.to_checkpoint().to_bytes() == before);
}

TEST(EntropyMinimize, NextImageStartsFromOriginal) {
  const SegNet model = converted(InstCalU{});
  const Tensor a = evaluation_sample(small_eval(), DomainSpec::identity(), 0).image.reshaped({1, 3, 64, 64});
  const Tensor b = evaluation_sample(small_eval(), DomainSpec::identity(), 1).image.reshaped({1, 3, 64, 64});
  const Tensor direct = entropy_minimize(model, b, 1, 1e-2);
  entropy_minimize(model, a, 1, 1e-2);
  EXPECT_TRUE(bitwise_equal(entropy_minimize(model, b, 1, 1e-2), direct));
}

TEST(ParallelFor, CoversAllIndicesAndPropagatesErrors) {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
  parallel_for(0, 4, [](std::size_t) { FAIL(); });
}
