#include "instcal/norm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "instcal/rng.hpp"

namespace instcal {
namespace {

std::vector<std::size_t> all_but_channel(const Tensor& x) {
  if (x.rank() < 3) throw DimensionError("norm: input must be N,C,spatial... got " + to_string(x.shape()));
  std::vector<std::size_t> axes{0};
  for (std::size_t a = 2; a < x.rank(); ++a) axes.push_back(a);
  return axes;
}

std::vector<std::size_t> spatial_axes(const Tensor& x) {
  if (x.rank() < 3) throw DimensionError("norm: input must be N,C,spatial... got " + to_string(x.shape()));
  std::vector<std::size_t> axes;
  for (std::size_t a = 2; a < x.rank(); ++a) axes.push_back(a);
  return axes;
}

// Per-sample [N,C] statistics: instance moments, or batch moments repeated
// for every sample.
Moments calibration_source(Var x, StatsScope scope) {
  if (scope == StatsScope::Instance) return reduce_stats(x, spatial_axes(x.value()));
  Moments pooled = reduce_stats(x, all_but_channel(x.value()));
  const std::size_t n = x.shape()[0];
  return {broadcast_rows(pooled.mean, n), broadcast_rows(pooled.var, n)};
}

Var calibrated(Var x, const NormVars& p, Var mu_ins, Var var_ins, Var m_mu, Var m_sigma) {
  Var mixed_mu = mix(p.mu_pop, mu_ins, m_mu);
  // Extrapolated strengths can push the convex form below zero.
  Var mixed_var = clamp_min(mix(p.var_pop, var_ins, m_sigma), Real(0));
  return normalize_affine(x, mixed_mu, mixed_var, p.gamma, p.beta, p.epsilon);
}

Tensor random_uniform(Shape shape, Real bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (Real& v : t.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
  return t;
}

void require_channels(const char* what, const Tensor& t, std::size_t c) {
  if (t.shape() != Shape{c}) {
    throw DimensionError(std::string(what) + " shape " + to_string(t.shape()) + " must be [" + std::to_string(c) + "]");
  }
}

}  // namespace

NormLayerState NormLayerState::fresh(std::size_t channels) {
  NormLayerState s;
  s.mu_pop = Tensor(Shape{channels}, Real(0));
  s.var_pop = Tensor(Shape{channels}, Real(1));
  s.gamma = Tensor(Shape{channels}, Real(1));
  s.beta = Tensor(Shape{channels}, Real(0));
  return s;
}

void NormLayerState::validate() const {
  const std::size_t c = gamma.numel();
  require_channels("gamma", gamma, c);
  require_channels("beta", beta, c);
  require_channels("mu_pop", mu_pop, c);
  require_channels("var_pop", var_pop, c);
  if (std::any_of(var_pop.data().begin(), var_pop.data().end(), [](Real v) { return v < 0; })) {
    throw std::invalid_argument("var_pop must be non-negative");
  }
  if (!(epsilon > 0)) throw std::invalid_argument("epsilon must be positive");
  if (!(momentum > 0 && momentum < 1)) throw std::invalid_argument("momentum must lie in (0,1)");
}

BatchStats batch_stats(const Tensor& x) {
  Graph g(false);
  Moments m = reduce_stats(g.constant(x), all_but_channel(x));
  return {m.mean.value(), m.var.value()};
}

InstanceStats instance_stats(const Tensor& x) {
  Graph g(false);
  Moments m = reduce_stats(g.constant(x), spatial_axes(x));
  return {m.mean.value(), m.var.value()};
}

CalibrationU CalibrationU::constant(std::size_t channels, Real value) {
  return {Tensor(Shape{channels}, value), Tensor(Shape{channels}, value)};
}

Mlp Mlp::initialized(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed, Real init_scale) {
  Rng rng(seed);
  Mlp m;
  const Real bound = init_scale / std::sqrt(static_cast<Real>(in));
  m.w1 = random_uniform(Shape{hidden, in}, bound, rng);
  m.b1 = Tensor(Shape{hidden}, Real(0));
  m.w2 = Tensor(Shape{out, hidden}, Real(0));
  m.b2 = Tensor(Shape{out}, Real(0));
  return m;
}

CalibrationC CalibrationC::initialized(std::size_t channels, std::size_t basis_count, std::size_t hidden,
                                       std::uint64_t seed, Real basis_value, Real basis_spread) {
  if (basis_count < 1) throw std::invalid_argument("InstCal-C needs at least one basis vector");
  CalibrationC c;
  c.basis_mu = Tensor(Shape{basis_count, channels});
  for (std::size_t k = 0; k < basis_count; ++k) {
    const Real offset = basis_count == 1 ? Real(0)
                                         : (Real(2) * Real(k) - Real(basis_count - 1)) / Real(basis_count - 1);
    for (std::size_t ch = 0; ch < channels; ++ch) c.basis_mu[k * channels + ch] = basis_value + basis_spread * offset;
  }
  c.basis_sigma = c.basis_mu;
  c.mlp_mu = Mlp::initialized(2 * channels, hidden, basis_count, mix_seed(seed, 1));
  c.mlp_sigma = Mlp::initialized(2 * channels, hidden, basis_count, mix_seed(seed, 2));
  return c;
}

void CalibrationC::validate() const {
  const std::size_t k = basis_mu.dim(0);
  const std::size_t c = basis_mu.dim(1);
  if (k < 1) throw std::invalid_argument("InstCal-C needs at least one basis vector");
  if (basis_sigma.shape() != basis_mu.shape()) throw DimensionError("basis_sigma shape differs from basis_mu");
  for (const Mlp* m : {&mlp_mu, &mlp_sigma}) {
    if (m->in_width() != 2 * c || m->out_width() != k) {
      throw DimensionError("InstCal-C MLP must map " + std::to_string(2 * c) + " -> " + std::to_string(k));
    }
  }
}

NormVars bind_norm(Graph& g, const NormLayerState& state, bool affine_trainable) {
  return {g.constant(state.mu_pop), g.constant(state.var_pop), g.leaf(state.gamma, affine_trainable),
          g.leaf(state.beta, affine_trainable), state.epsilon};
}

MlpVars bind_mlp(Graph& g, const Mlp& mlp, bool trainable) {
  return {g.leaf(mlp.w1, trainable), g.leaf(mlp.b1, trainable), g.leaf(mlp.w2, trainable), g.leaf(mlp.b2, trainable)};
}

CalibrationCVars bind_calibration(Graph& g, const CalibrationC& cal, bool trainable) {
  return {g.leaf(cal.basis_mu, trainable), g.leaf(cal.basis_sigma, trainable), bind_mlp(g, cal.mlp_mu, trainable),
          bind_mlp(g, cal.mlp_sigma, trainable)};
}

Var norm_batch(Var x, const NormVars& p, BatchStats* stats) {
  Moments m = reduce_stats(x, all_but_channel(x.value()));
  if (stats) *stats = {m.mean.value(), m.var.value()};
  return normalize_affine(x, m.mean, m.var, p.gamma, p.beta, p.epsilon);
}

Var norm_population(Var x, const NormVars& p) {
  return normalize_affine(x, p.mu_pop, p.var_pop, p.gamma, p.beta, p.epsilon);
}

Var norm_manual(Var x, const NormVars& p, Real m, StatsScope scope) {
  Moments ins = calibration_source(x, scope);
  Var strength = x.graph().constant(Tensor::scalar(m));
  return calibrated(x, p, ins.mean, ins.var, strength, strength);
}

Var norm_instcal_u(Var x, const NormVars& p, Var m_mu, Var m_sigma, StatsScope scope) {
  Moments ins = calibration_source(x, scope);
  return calibrated(x, p, ins.mean, ins.var, m_mu, m_sigma);
}

Var calibration_coefficients(Var stat_pop, Var stat_ins, const MlpVars& mlp) {
  if (stat_ins.value().rank() != 2 || stat_pop.shape() != Shape{stat_ins.shape()[1]}) {
    throw DimensionError("calibration_coefficients: population stat " + to_string(stat_pop.shape()) +
                         " and instance stat " + to_string(stat_ins.shape()) + " must be [C] and [N,C]");
  }
  const std::size_t width = 2 * stat_pop.shape()[0];
  if (mlp.w1.value().rank() != 2 || mlp.w1.shape()[1] != width) {
    throw DimensionError("calibration_coefficients: MLP input width " + to_string(mlp.w1.shape()) +
                         " does not accept concatenated statistics of width " + std::to_string(width));
  }
  Var input = concat_last(broadcast_rows(stat_pop, stat_ins.shape()[0]), stat_ins);
  Var hidden = relu(linear(input, mlp.w1, mlp.b1));
  return softmax(linear(hidden, mlp.w2, mlp.b2), 1);
}

Var norm_instcal_c(Var x, const NormVars& p, const CalibrationCVars& cal, StatsScope scope) {
  Moments ins = calibration_source(x, scope);
  Var c_mu = calibration_coefficients(p.mu_pop, ins.mean, cal.mlp_mu);
  Var c_sigma = calibration_coefficients(p.var_pop, ins.var, cal.mlp_sigma);
  Var m_mu = matmul(c_mu, cal.basis_mu);
  Var m_sigma = matmul(c_sigma, cal.basis_sigma);
  return calibrated(x, p, ins.mean, ins.var, m_mu, m_sigma);
}

Tensor mix(const Tensor& a, const Tensor& b, const Tensor& m) {
  Graph g(false);
  return mix(g.constant(a), g.constant(b), g.constant(m)).value();
}

void update_population(NormLayerState& state, const BatchStats& stats) {
  const Real alpha = state.momentum;
  for (std::size_t c = 0; c < state.channels(); ++c) {
    state.mu_pop[c] = (Real(1) - alpha) * state.mu_pop[c] + alpha * stats.mu_b[c];
    state.var_pop[c] = (Real(1) - alpha) * state.var_pop[c] + alpha * stats.var_b[c];
  }
}

BnTrainResult bn_forward_train(const Tensor& x, const NormLayerState& state) {
  if (state.mode != NormMode::Train) throw std::invalid_argument("bn_forward_train requires a layer in Train mode");
  state.validate();
  Graph g(false);
  BatchStats stats;
  Tensor y = norm_batch(g.constant(x), bind_norm(g, state), &stats).value();
  NormLayerState next = state;
  update_population(next, stats);
  return {std::move(y), std::move(next)};
}

Tensor bn_forward_eval(const Tensor& x, const NormLayerState& state) {
  if (state.mode != NormMode::Eval) throw std::invalid_argument("bn_forward_eval requires a layer in Eval mode");
  state.validate();
  Graph g(false);
  return norm_population(g.constant(x), bind_norm(g, state)).value();
}

Tensor manual_calibrated_forward(const Tensor& x, const NormLayerState& state, Real m) {
  state.validate();
  Graph g(false);
  return norm_manual(g.constant(x), bind_norm(g, state), m).value();
}

Tensor instcal_u_forward(const Tensor& x, const NormLayerState& state, const CalibrationU& cal) {
  state.validate();
  require_channels("m_mu", cal.m_mu, state.channels());
  require_channels("m_sigma", cal.m_sigma, state.channels());
  Graph g(false);
  return norm_instcal_u(g.constant(x), bind_norm(g, state), g.constant(cal.m_mu), g.constant(cal.m_sigma)).value();
}

Tensor instcal_c_coefficients(const Tensor& stat_pop, const Tensor& stat_ins, const Mlp& mlp) {
  Graph g(false);
  const bool single = stat_ins.rank() == 1;
  Tensor rows = single ? stat_ins.reshaped(Shape{1, stat_ins.numel()}) : stat_ins;
  Tensor out = calibration_coefficients(g.constant(stat_pop), g.constant(rows), bind_mlp(g, mlp, false)).value();
  return single ? out.reshaped(Shape{out.numel()}) : out;
}

Tensor instcal_c_forward(const Tensor& x, const NormLayerState& state, const CalibrationC& cal) {
  state.validate();
  cal.validate();
  if (cal.channels() != state.channels()) {
    throw DimensionError("InstCal-C basis has " + std::to_string(cal.channels()) + " channels, layer has " +
                         std::to_string(state.channels()));
  }
  Graph g(false);
  return norm_instcal_c(g.constant(x), bind_norm(g, state), bind_calibration(g, cal, false)).value();
}

}  // namespace instcal
