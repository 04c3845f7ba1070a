#pragma once

#include <cstdint>
#include <vector>

#include "instcal/graph.hpp"
#include "instcal/ops.hpp"

namespace instcal {

enum class NormMode { Train, Eval };

inline constexpr Real kDefaultEpsilon = Real(1e-5);
inline constexpr Real kDefaultMomentum = Real(0.1);
inline constexpr Real kCalibrationInit = Real(0.1);
/// Half-width of the evenly spaced initial InstCal-C bases around
/// kCalibrationInit. Identical bases are a fixed point of training: every
/// coefficient receives the same gradient, so the MLPs never learn.
inline constexpr Real kBasisSpread = Real(0.05);
inline constexpr std::size_t kDefaultBasisCount = 8;
inline constexpr std::size_t kDefaultMlpHidden = 64;

/// Population statistics, affine parameters and EMA settings of one BatchNorm
/// layer.
struct NormLayerState {
  Tensor mu_pop;
  Tensor var_pop;
  Tensor gamma;
  Tensor beta;
  Real momentum = kDefaultMomentum;
  Real epsilon = kDefaultEpsilon;
  NormMode mode = NormMode::Train;

  /// Fresh layer: mu_pop 0, var_pop 1, gamma 1, beta 0.
  static NormLayerState fresh(std::size_t channels);
  std::size_t channels() const { return gamma.numel(); }
  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;
};

struct BatchStats {
  Tensor mu_b;   // [C]
  Tensor var_b;  // [C]
};

/// Per-sample statistics over H,W only.
struct InstanceStats {
  Tensor mu_ins;   // [B,C]
  Tensor var_ins;  // [B,C]
};

BatchStats batch_stats(const Tensor& x);
InstanceStats instance_stats(const Tensor& x);

struct CalibrationU {
  Tensor m_mu;     // [C]
  Tensor m_sigma;  // [C]

  static CalibrationU constant(std::size_t channels, Real value = kCalibrationInit);
};

/// Two-layer perceptron In -> Hidden -> K with a ReLU in between.
struct Mlp {
  Tensor w1;  // [H, In]
  Tensor b1;  // [H]
  Tensor w2;  // [K, H]
  Tensor b2;  // [K]

  /// Hidden layer uniform in +-init_scale/sqrt(In); output layer zero, so the
  /// initial coefficients are uniform.
  static Mlp initialized(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed,
                         Real init_scale = Real(0.5));
  std::size_t in_width() const { return w1.dim(1); }
  std::size_t out_width() const { return w2.dim(0); }
};

struct CalibrationC {
  Tensor basis_mu;     // [K, C]
  Tensor basis_sigma;  // [K, C]
  Mlp mlp_mu;          // 2C -> H -> K
  Mlp mlp_sigma;       // 2C -> H -> K

  /// Bases evenly spaced over basis_value +- basis_spread (mean basis_value),
  /// so with the uniform initial coefficients the effective strength is
  /// basis_value.
  static CalibrationC initialized(std::size_t channels, std::size_t basis_count, std::size_t hidden,
                                  std::uint64_t seed, Real basis_value = kCalibrationInit,
                                  Real basis_spread = kBasisSpread);
  std::size_t basis_count() const { return basis_mu.dim(0); }
  std::size_t channels() const { return basis_mu.dim(1); }
  void validate() const;
};

/// Graph handles for a norm layer's fixed tensors.
struct NormVars {
  Var mu_pop;
  Var var_pop;
  Var gamma;
  Var beta;
  Real epsilon = kDefaultEpsilon;
};

struct MlpVars {
  Var w1, b1, w2, b2;
};

struct CalibrationCVars {
  Var basis_mu;
  Var basis_sigma;
  MlpVars mlp_mu;
  MlpVars mlp_sigma;
};

/// Where the "instance" statistic of a calibrated layer comes from. Batch
/// pools over (N,H,W) and shares the result across the batch; it exists only
/// for the batch-statistics comparison.
enum class StatsScope { Instance, Batch };

NormVars bind_norm(Graph& g, const NormLayerState& state, bool affine_trainable = false);
MlpVars bind_mlp(Graph& g, const Mlp& mlp, bool trainable);
CalibrationCVars bind_calibration(Graph& g, const CalibrationC& cal, bool trainable);

// Graph-level layer functions.

/// Normalizes with batch statistics and returns them through `stats`.
Var norm_batch(Var x, const NormVars& p, BatchStats* stats = nullptr);
Var norm_population(Var x, const NormVars& p);
Var norm_manual(Var x, const NormVars& p, Real m, StatsScope scope = StatsScope::Instance);
Var norm_instcal_u(Var x, const NormVars& p, Var m_mu, Var m_sigma, StatsScope scope = StatsScope::Instance);
/// Softmax(g(Concat(stat_pop, stat_ins))) per sample; stat_pop is [C],
/// stat_ins is [N,C]. Returns [N,K].
Var calibration_coefficients(Var stat_pop, Var stat_ins, const MlpVars& mlp);
Var norm_instcal_c(Var x, const NormVars& p, const CalibrationCVars& cal, StatsScope scope = StatsScope::Instance);

// Tensor-level entry points (no gradient tracking).

Tensor mix(const Tensor& a, const Tensor& b, const Tensor& m);

struct BnTrainResult {
  Tensor y;
  NormLayerState state;
};

/// Batch-statistics normalization plus the EMA update
/// pop <- (1 - momentum) pop + momentum batch.
BnTrainResult bn_forward_train(const Tensor& x, const NormLayerState& state);
/// In-place EMA update of population statistics.
void update_population(NormLayerState& state, const BatchStats& stats);
Tensor bn_forward_eval(const Tensor& x, const NormLayerState& state);
Tensor manual_calibrated_forward(const Tensor& x, const NormLayerState& state, Real m);
Tensor instcal_u_forward(const Tensor& x, const NormLayerState& state, const CalibrationU& cal);
/// Coefficients [N,K] for each row of stat_ins [N,C] against stat_pop [C].
Tensor instcal_c_coefficients(const Tensor& stat_pop, const Tensor& stat_ins, const Mlp& mlp);
Tensor instcal_c_forward(const Tensor& x, const NormLayerState& state, const CalibrationC& cal);

}  // namespace instcal
