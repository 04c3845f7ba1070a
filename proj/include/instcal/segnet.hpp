#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "instcal/checkpoint.hpp"
#include "instcal/graph.hpp"
#include "instcal/norm.hpp"

namespace instcal {

struct PlainBN {};
struct ManualM {
  Real m = kCalibrationInit;
};
struct InstCalU {};
struct InstCalC {
  std::size_t basis_count = kDefaultBasisCount;
};
using NormVariant = std::variant<PlainBN, ManualM, InstCalU, InstCalC>;

/// "plain", "manual", "instcal-u" or "instcal-c".
std::string variant_name(const NormVariant& v);
nlohmann::json variant_to_json(const NormVariant& v);
NormVariant variant_from_json(const nlohmann::json& j);

class ConversionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FrozenTensorError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct SegNetConfig {
  std::vector<std::size_t> widths{16, 32, 32, 16};
  std::size_t in_channels = 3;
  std::size_t n_classes = 5;
  std::size_t mlp_hidden = kDefaultMlpHidden;

  void validate() const;
};

void to_json(nlohmann::json& j, const SegNetConfig& c);
void from_json(const nlohmann::json& j, SegNetConfig& c);

struct ConvLayer {
  Tensor weight;  // [out, in, 3, 3]
  Tensor bias;    // [out]
  std::size_t stride = 1;
  std::size_t upsample_before = 1;  // nearest-neighbour factor applied to the input
};

struct NormLayer {
  NormLayerState state;
  NormVariant variant = PlainBN{};
  CalibrationU u;  // InstCalU only
  CalibrationC c;  // InstCalC only
};

/// Which tensors become gradient-carrying leaves in a forward pass.
enum class Trainable { None, Backbone, Calibration, Affine };

struct ForwardOptions {
  NormMode mode = NormMode::Eval;
  StatsScope scope = StatsScope::Instance;
  Trainable trainable = Trainable::None;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
  bool trainable;
};

struct BoundParam {
  std::string name;
  Tensor* tensor;
  Var var;
};

struct ForwardResult {
  Var logits;
  std::vector<BoundParam> params;
};

/// Fully convolutional encoder-decoder: conv(stride 1) -> conv(stride 2) ->
/// conv(stride 2) -> up x2, conv -> up x2, classifier conv. Every conv except
/// the classifier is followed by a norm layer and ReLU.
class SegNet {
 public:
  static SegNet build(const SegNetConfig& config, std::uint64_t seed);
  static SegNet from_checkpoint(const Checkpoint& ck);
  Checkpoint to_checkpoint() const;

  const SegNetConfig& config() const { return config_; }
  std::vector<ConvLayer>& convs() { return convs_; }
  const std::vector<ConvLayer>& convs() const { return convs_; }
  std::vector<NormLayer>& norms() { return norms_; }
  const std::vector<NormLayer>& norms() const { return norms_; }

  /// Variant shared by all norm layers.
  const NormVariant& variant() const;
  bool converted() const;

  /// Replaces every BN layer; statistics and affine parameters are kept and
  /// frozen, calibration parameters start at kCalibrationInit.
  void convert(const NormVariant& target, std::uint64_t seed);

  /// Names and flags of every stored tensor. Bases appear whole here and
  /// as per-row arrays in checkpoints.
  std::vector<NamedTensor> named_tensors();
  std::vector<std::string> trainable_names() const;
  /// Learnable parameters (running statistics excluded).
  std::size_t parameter_count() const;

  /// Train mode on plain BN layers uses batch statistics and updates the
  /// running averages in place. Calibrated layers ignore the mode.
  ForwardResult forward(Graph& g, const Tensor& images, const ForwardOptions& options);
  /// Eval-mode logits without recording; never mutates the model.
  Tensor infer(const Tensor& images, StatsScope scope = StatsScope::Instance) const;

 private:
  SegNetConfig config_;
  std::vector<ConvLayer> convs_;  // last one is the classifier
  std::vector<NormLayer> norms_;
};

/// True for checkpoint names that hold calibration parameters.
bool is_calibration_name(const std::string& name);

}  // namespace instcal
