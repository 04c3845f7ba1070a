#include "instcal/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "instcal/rng.hpp"

namespace instcal {
namespace {

constexpr int kMaxAttempts = 16;

struct Point {
  double x, y;
};

double cross(Point o, Point a, Point b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

bool in_triangle(Point p, const std::array<Point, 3>& t) {
  const double d1 = cross(t[0], t[1], p);
  const double d2 = cross(t[1], t[2], p);
  const double d3 = cross(t[2], t[0], p);
  const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
  const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
  return !(neg && pos);
}

// Rasterizes one randomly placed shape of the given class into a coverage map.
std::vector<char> draw_shape(int cls, Rng& rng, std::size_t size) {
  const double s = static_cast<double>(size);
  std::vector<char> cover(size * size, 0);
  const double cx = rng.uniform(0.1 * s, 0.9 * s);
  const double cy = rng.uniform(0.1 * s, 0.9 * s);
  auto fill = [&](auto&& inside) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        cover[y * size + x] = inside(Point{static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5});
      }
    }
  };
  const double scale = s / 64;
  switch (cls) {
    case kCircle: {
      const double r = rng.uniform(5, 12) * scale;
      fill([&](Point p) { return (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy) <= r * r; });
      break;
    }
    case kRectangle: {
      const double hw = rng.uniform(4, 12) * scale;
      const double hh = rng.uniform(4, 12) * scale;
      fill([&](Point p) { return std::abs(p.x - cx) <= hw && std::abs(p.y - cy) <= hh; });
      break;
    }
    case kTriangle: {
      const double radius = rng.uniform(8, 15) * scale;
      const double phase = rng.uniform(0, 2 * std::numbers::pi);
      std::array<Point, 3> t{};
      for (std::size_t k = 0; k < 3; ++k) {
        const double a = phase + 2 * std::numbers::pi * static_cast<double>(k) / 3 + rng.uniform(-0.35, 0.35);
        const double r = radius * rng.uniform(0.8, 1.2);
        t[k] = Point{cx + r * std::cos(a), cy + r * std::sin(a)};
      }
      fill([&](Point p) { return in_triangle(p, t); });
      break;
    }
    case kStripe: {
      const double angle = rng.uniform(0, std::numbers::pi);
      const double half = rng.uniform(2, 4) * scale;
      const double nx = std::cos(angle);
      const double ny = std::sin(angle);
      fill([&](Point p) { return std::abs((p.x - cx) * nx + (p.y - cy) * ny) <= half; });
      break;
    }
    default: throw std::invalid_argument("not a shape class: " + std::to_string(cls));
  }
  return cover;
}

Real jittered(Real base, Real jitter, Rng& rng) {
  return std::clamp<Real>(base + static_cast<Real>(rng.uniform(-jitter, jitter)), 0, 1);
}

}  // namespace

std::string class_name(int label) {
  switch (label) {
    case kBackground: return "background";
    case kCircle: return "circle";
    case kRectangle: return "rectangle";
    case kTriangle: return "triangle";
    case kStripe: return "stripe";
  }
  throw std::invalid_argument("unknown class label " + std::to_string(label));
}

Palette Palette::standard() {
  Palette p;
  p.base = {Rgb{0.5, 0.5, 0.5}, Rgb{0.85, 0.25, 0.2}, Rgb{0.2, 0.7, 0.3}, Rgb{0.25, 0.35, 0.85},
            Rgb{0.9, 0.8, 0.2}};
  return p;
}

Sample generate_scene(std::uint64_t seed, const SceneConfig& config) {
  if (config.size == 0) throw std::invalid_argument("scene size must be positive");
  if (config.min_shapes > config.max_shapes) throw std::invalid_argument("min_shapes exceeds max_shapes");
  const std::size_t n = config.size;
  Rng rng(seed);
  Sample sample;
  sample.seed = seed;
  sample.image = Tensor({3, n, n});
  sample.mask = LabelMask{n, n, std::vector<int>(n * n, kBackground)};

  const Palette& pal = config.palette;
  Rgb from{}, to{};
  for (std::size_t c = 0; c < 3; ++c) {
    from[c] = jittered(pal.base[kBackground][c], pal.background_jitter, rng);
    to[c] = jittered(pal.base[kBackground][c], pal.background_jitter, rng);
  }
  const double angle = rng.uniform(0, 2 * std::numbers::pi);
  const double gx = std::cos(angle);
  const double gy = std::sin(angle);
  const double half = static_cast<double>(n) / 2;
  const std::size_t plane = n * n;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      // projection onto the gradient direction, mapped into [0,1]
      const double proj = ((static_cast<double>(x) + 0.5 - half) * gx + (static_cast<double>(y) + 0.5 - half) * gy) /
                          (std::sqrt(2.0) * half);
      const auto t = static_cast<Real>(std::clamp(0.5 + 0.5 * proj, 0.0, 1.0));
      for (std::size_t c = 0; c < 3; ++c) sample.image[c * plane + y * n + x] = (1 - t) * from[c] + t * to[c];
    }
  }

  const std::size_t count = config.min_shapes + rng.index(config.max_shapes - config.min_shapes + 1);
  for (std::size_t s = 0; s < count; ++s) {
    const int cls = 1 + static_cast<int>(rng.index(kNumClasses - 1));
    Rgb color{};
    for (std::size_t c = 0; c < 3; ++c) color[c] = jittered(pal.base[cls][c], pal.shape_jitter, rng);
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const std::vector<char> cover = draw_shape(cls, rng, n);
      if (static_cast<std::size_t>(std::count(cover.begin(), cover.end(), 1)) < kMinShapePixels) continue;
      for (std::size_t i = 0; i < plane; ++i) {
        if (!cover[i]) continue;
        sample.mask.labels[i] = cls;
        for (std::size_t c = 0; c < 3; ++c) sample.image[c * plane + i] = color[c];
      }
      break;
    }
  }
  return sample;
}

Sample with_domain(const Sample& source, const DomainSpec& domain) {
  AugmentedPair pair = apply_domain(domain, source.image, source.mask, source.seed);
  Sample out;
  out.image = std::move(pair.image);
  out.mask = std::move(pair.mask);
  out.seed = source.seed;
  out.domain = domain;
  return out;
}

std::uint64_t scene_seed(std::uint64_t global_seed, Split split, std::uint64_t index) {
  return mix_seed(mix_seed(global_seed, static_cast<std::uint64_t>(split)), index);
}

void write_ppm(const std::filesystem::path& path, const Tensor& image, const std::string& comment) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("PPM needs a 3 x H x W image");
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << "P6\n";
  if (!comment.empty()) out << "# " << comment << "\n";
  out << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> row(w * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const Real v = std::clamp<Real>(image[(c * h + y) * w + x], 0, 1);
        row[x * 3 + c] = static_cast<unsigned char>(std::lround(v * 255));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

Tensor colorize_mask(const LabelMask& mask) {
  const Palette pal = Palette::standard();
  Tensor out({3, mask.height, mask.width});
  const std::size_t plane = mask.height * mask.width;
  for (std::size_t i = 0; i < plane; ++i) {
    const int l = mask.labels[i];
    if (l < 0 || l >= static_cast<int>(kNumClasses)) continue;
    const Rgb& rgb = l == kBackground ? Rgb{0.15, 0.15, 0.15} : pal.base[static_cast<std::size_t>(l)];
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = rgb[c];
  }
  return out;
}

Tensor triptych(const Tensor& image, const LabelMask& truth, const LabelMask& prediction) {
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  const std::array<Tensor, 3> panels{image, colorize_mask(truth), colorize_mask(prediction)};
  Tensor out({3, h, 3 * w});
  for (std::size_t p = 0; p < 3; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) out[(c * h + y) * 3 * w + p * w + x] = panels[p][(c * h + y) * w + x];
      }
    }
  }
  return out;
}

}  // namespace instcal
