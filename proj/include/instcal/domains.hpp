#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "instcal/tensor.hpp"

namespace instcal {

inline constexpr int kIgnoreLabel = 255;
/// Bumped whenever a corruption constant changes, so reports stay comparable.
inline constexpr int kCorruptionTableVersion = 1;

/// Per-pixel class labels, row-major H x W.
struct LabelMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;

  int& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  int at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

enum class DomainKind { Identity, RandColor, AugMixStyle, NetPerturb, Corruption };

/// Declarative pseudo-domain or target-domain pipeline. Serializes as
/// {"kind", "seed", "params"}; corruptions carry params.name and
/// params.severity.
struct DomainSpec {
  DomainKind kind = DomainKind::Identity;
  std::uint64_t seed = 0;
  std::string corruption;  // Corruption only
  int severity = 0;        // Corruption only
  std::map<std::string, double> params;

  static DomainSpec identity() { return {}; }
  static DomainSpec corrupted(std::string name, int severity, std::uint64_t seed = 0);
  static DomainSpec augmentation(DomainKind kind, std::uint64_t seed = 0);

  /// Short label used in report rows, e.g. "source", "fog", "netperturb".
  std::string label() const;
  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

std::string to_string(DomainKind kind);
DomainKind parse_domain_kind(const std::string& name);
/// Accepts "identity"/"source", "randcolor", "augmix", "netperturb" and
/// "<corruption>-<severity>" such as "fog-2".
DomainSpec parse_domain(const std::string& text);

void to_json(nlohmann::json& j, const DomainSpec& d);
void from_json(const nlohmann::json& j, DomainSpec& d);

// ---- Color operations (images are 3 x H x W in [0,1]) ----

enum class ColorOp { Identity, AutoContrast, Invert, Equalize, Solarize, Posterize, Color, Brightness, Sharpness };
inline constexpr std::size_t kColorOpCount = 9;
std::string to_string(ColorOp op);

/// Applies one color operation; magnitude in [0,1] maps onto the op's range.
Tensor apply_color_op(const Tensor& image, ColorOp op, double magnitude);

struct ColorDraw {
  ColorOp op;
  double magnitude;
};

/// The two (op, magnitude) draws rand_color_augment makes for a seed.
std::array<ColorDraw, 2> sample_rand_color(std::uint64_t seed);
/// Composes two color ops drawn uniformly with replacement from the nine-op
/// list, at uniform random magnitudes. Output clamped to [0,1].
Tensor rand_color_augment(const Tensor& image, std::uint64_t seed);

// ---- AugMix-style mixing ----

enum class GeometricOp { TranslateX, TranslateY, Rotate };

struct GeometricDraw {
  GeometricOp op;
  double amount;  // fraction of the side for translations, degrees for Rotate
};

struct AugMixPlan {
  std::optional<GeometricDraw> geometric;           // shared by image, chains and mask
  std::array<std::vector<ColorDraw>, 3> chains;     // depths 1, 2, 3
  std::array<double, 3> chain_weights{1, 0, 0};     // Dirichlet sample
  double blend = 0;                                 // Beta sample; 0 keeps the (transformed) original
};

struct AugmentedPair {
  Tensor image;
  LabelMask mask;
};

AugMixPlan sample_augmix(std::uint64_t seed, double dirichlet_alpha = 1.0, double beta_alpha = 1.0);
AugmentedPair apply_augmix(const Tensor& image, const LabelMask& mask, const AugMixPlan& plan);
AugmentedPair augmix_style(const Tensor& image, const LabelMask& mask, std::uint64_t seed);

/// Nearest-neighbour geometric warp; pixels sampled from outside the frame
/// become mid-grey in the image and kIgnoreLabel in the mask.
AugmentedPair apply_geometric(const Tensor& image, const LabelMask& mask, const GeometricDraw& draw);

// ---- Network-perturbation augmentation ----

/// Shallow image-to-image conv network 3 -> 8 -> 8 -> 3 (3x3 kernels).
struct PerturbNetwork {
  std::array<Tensor, 3> weights;
  std::array<Tensor, 3> biases;

  static PerturbNetwork random(std::uint64_t seed);
  /// Passes channels 0..2 straight through (centre-tap identity kernels).
  static PerturbNetwork identity();
};

/// Per-channel perturbations of the two hidden activations.
struct PerturbDraw {
  std::array<std::vector<double>, 2> scale;     // in [0.5, 2]
  std::array<std::vector<bool>, 2> flip;        // probability 0.1
  std::array<std::vector<bool>, 2> drop;        // probability 0.1

  static PerturbDraw random(std::uint64_t seed);
  static PerturbDraw neutral();
};

Tensor apply_net_perturb(const Tensor& image, const PerturbNetwork& net, const PerturbDraw& draw);
Tensor net_perturb_augment(const Tensor& image, std::uint64_t seed);

// ---- Target-domain corruptions ----

inline const std::vector<std::string>& corruption_names() {
  static const std::vector<std::string> names{"fog", "hue_rotate", "contrast", "gauss_noise", "channel_swap"};
  return names;
}

/// Severity-indexed constant for a corruption (fog blend weight, contrast
/// factor, noise sigma, hue angle in degrees, or the swapped channel pair
/// encoded as 10*a + b).
double corruption_level(const std::string& name, int severity);

Tensor corrupt(const Tensor& image, const std::string& name, int severity, std::uint64_t seed);

/// Applies a domain to an (image, mask) pair; only AugMixStyle touches the mask.
AugmentedPair apply_domain(const DomainSpec& domain, const Tensor& image, const LabelMask& mask,
                           std::uint64_t sample_seed);

}  // namespace instcal
