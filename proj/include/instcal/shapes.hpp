#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "instcal/domains.hpp"
#include "instcal/tensor.hpp"

namespace instcal {

inline constexpr std::size_t kNumClasses = 5;
enum ShapeClass : int { kBackground = 0, kCircle = 1, kRectangle = 2, kTriangle = 3, kStripe = 4 };

std::string class_name(int label);

using Rgb = std::array<Real, 3>;

struct Palette {
  std::array<Rgb, kNumClasses> base;
  Real shape_jitter = 0.1;       // per instance, per channel
  Real background_jitter = 0.15; // gradient endpoints

  static Palette standard();
};

struct SceneConfig {
  std::size_t size = 64;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;
  Palette palette = Palette::standard();
};

struct Sample {
  Tensor image;  // 3 x size x size in [0,1]
  LabelMask mask;
  std::uint64_t seed = 0;
  DomainSpec domain;
};

/// Background gradient plus a random number of shapes painted in order, so
/// later shapes occlude earlier ones. Each shape covers at least
/// kMinShapePixels pixels when drawn.
Sample generate_scene(std::uint64_t seed, const SceneConfig& config = {});

inline constexpr std::size_t kMinShapePixels = 20;

/// Sample with a domain applied; the sample seed drives the domain randomness.
Sample with_domain(const Sample& source, const DomainSpec& domain);

enum class Split : std::uint64_t { Train = 1, Validation = 2, Test = 3 };
/// Disjoint per-split seed streams derived from one global seed.
std::uint64_t scene_seed(std::uint64_t global_seed, Split split, std::uint64_t index);

/// Binary PPM (P6) with an optional single-line header comment. The image
/// must be 3 x H x W in [0,1].
void write_ppm(const std::filesystem::path& path, const Tensor& image, const std::string& comment = "");
/// Colour-coded visualization of a label mask (ignored pixels black).
Tensor colorize_mask(const LabelMask& mask);
/// Input, ground truth and prediction side by side.
Tensor triptych(const Tensor& image, const LabelMask& truth, const LabelMask& prediction);

}  // namespace instcal
