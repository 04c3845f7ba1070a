#include "instcal/domains.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "instcal/graph.hpp"
#include "instcal/ops.hpp"
#include "instcal/rng.hpp"

namespace instcal {
namespace {

constexpr std::uint64_t kRandColorTag = 0xC0102;
constexpr std::uint64_t kAugMixTag = 0xA6317;
constexpr std::uint64_t kNetTag = 0xDEE9;
constexpr std::uint64_t kDrawTag = 0xD2A3;
constexpr std::uint64_t kNoiseTag = 0x9015E;

void check_image(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("expected a 3 x H x W image, got " + to_string(image.shape()));
  }
}

Real clamp01(Real v) { return std::clamp<Real>(v, 0, 1); }

Tensor clamped(Tensor t) {
  for (Real& v : t.data()) v = clamp01(v);
  return t;
}

Real luma(Real r, Real g, Real b) { return Real(0.299) * r + Real(0.587) * g + Real(0.114) * b; }

Real factor_of(double magnitude) { return static_cast<Real>(0.1 + 1.8 * magnitude); }

Tensor auto_contrast(const Tensor& image) {
  Tensor out = image;
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < 3; ++c) {
    const Real* p = image.data().data() + c * plane;
    const auto [lo, hi] = std::minmax_element(p, p + plane);
    if (*hi - *lo <= Real(1e-12)) continue;
    const Real lo_v = *lo;
    const Real span = *hi - *lo;
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = (p[i] - lo_v) / span;
  }
  return out;
}

std::size_t level_of(Real v) { return static_cast<std::size_t>(std::lround(clamp01(v) * 255)); }

Tensor equalize(const Tensor& image) {
  Tensor out = image;
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < 3; ++c) {
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < plane; ++i) ++hist[level_of(image[c * plane + i])];
    std::array<std::size_t, 256> cdf{};
    std::size_t running = 0;
    for (std::size_t l = 0; l < 256; ++l) cdf[l] = running += hist[l];
    const std::size_t first = *std::find_if(cdf.begin(), cdf.end(), [](std::size_t v) { return v > 0; });
    if (plane == first) continue;  // single-level channel
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t l = level_of(image[c * plane + i]);
      out[c * plane + i] = static_cast<Real>(cdf[l] - first) / static_cast<Real>(plane - first);
    }
  }
  return out;
}

Tensor posterize(const Tensor& image, double magnitude) {
  const int bits = 8 - std::clamp(static_cast<int>(magnitude * 5), 0, 4);
  const unsigned mask = (0xFFu << (8 - bits)) & 0xFFu;
  Tensor out = image;
  for (Real& v : out.data()) v = static_cast<Real>(static_cast<unsigned>(level_of(v)) & mask) / 255;
  return out;
}

Tensor saturation(const Tensor& image, Real factor) {
  Tensor out = image;
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t i = 0; i < plane; ++i) {
    const Real gray = luma(image[i], image[plane + i], image[2 * plane + i]);
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = gray + factor * (image[c * plane + i] - gray);
  }
  return out;
}

// 3x3 smoothing kernel [[1,1,1],[1,5,1],[1,1,1]]/13 on interior pixels;
// border pixels keep their value.
Tensor sharpness(const Tensor& image, Real factor) {
  Tensor out = image;
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 1; y + 1 < h; ++y) {
      for (std::size_t x = 1; x + 1 < w; ++x) {
        Real acc = 0;
        for (std::size_t dy = 0; dy < 3; ++dy) {
          for (std::size_t dx = 0; dx < 3; ++dx) acc += image[(c * h + y + dy - 1) * w + x + dx - 1];
        }
        const Real centre = image[(c * h + y) * w + x];
        const Real smooth = (acc + 4 * centre) / 13;
        out[(c * h + y) * w + x] = smooth + factor * (centre - smooth);
      }
    }
  }
  return out;
}

constexpr std::array<ColorOp, 7> kAugMixPool{ColorOp::AutoContrast, ColorOp::Equalize, ColorOp::Posterize,
                                            ColorOp::Solarize,     ColorOp::Color,    ColorOp::Brightness,
                                            ColorOp::Sharpness};

Tensor blend(const Tensor& a, const Tensor& b, Real weight_b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (1 - weight_b) * a[i] + weight_b * b[i];
  return out;
}

Tensor apply_chain(Tensor image, const std::vector<ColorDraw>& chain) {
  for (const ColorDraw& d : chain) image = apply_color_op(image, d.op, d.magnitude);
  return image;
}

Tensor conv_layer(const Tensor& x, const Tensor& w, const Tensor& b) {
  Graph g(false);
  return conv2d(g.constant(x), g.constant(w), g.constant(b), 1, 1).value();
}

void perturb(Tensor& h, const PerturbDraw& draw, std::size_t layer) {
  const std::size_t channels = h.dim(1);
  const std::size_t plane = h.dim(2) * h.dim(3);
  if (draw.scale[layer].size() != channels || draw.flip[layer].size() != channels ||
      draw.drop[layer].size() != channels) {
    throw DimensionError("perturbation draw does not match hidden width " + std::to_string(channels));
  }
  for (std::size_t c = 0; c < channels; ++c) {
    Real f = static_cast<Real>(draw.scale[layer][c]);
    if (draw.flip[layer][c]) f = -f;
    if (draw.drop[layer][c]) f = 0;
    for (std::size_t i = 0; i < plane; ++i) h[c * plane + i] *= f;
  }
}

constexpr std::size_t kPerturbHidden = 8;

void check_severity(const std::string& name, int severity) {
  if (severity < 0 || severity > 3) {
    throw std::invalid_argument("severity for '" + name + "' must be in 0..3, got " + std::to_string(severity));
  }
}

}  // namespace

// ---- DomainSpec ----

DomainSpec DomainSpec::corrupted(std::string name, int severity, std::uint64_t seed) {
  corruption_level(name, severity);  // validates
  DomainSpec d;
  d.kind = DomainKind::Corruption;
  d.seed = seed;
  d.corruption = std::move(name);
  d.severity = severity;
  return d;
}

DomainSpec DomainSpec::augmentation(DomainKind kind, std::uint64_t seed) {
  if (kind == DomainKind::Corruption) throw std::invalid_argument("use DomainSpec::corrupted for corruptions");
  DomainSpec d;
  d.kind = kind;
  d.seed = seed;
  return d;
}

std::string DomainSpec::label() const {
  if (kind == DomainKind::Identity) return "source";
  if (kind == DomainKind::Corruption) return corruption + "-" + std::to_string(severity);
  return to_string(kind);
}

std::string to_string(DomainKind kind) {
  switch (kind) {
    case DomainKind::Identity: return "identity";
    case DomainKind::RandColor: return "randcolor";
    case DomainKind::AugMixStyle: return "augmix";
    case DomainKind::NetPerturb: return "netperturb";
    case DomainKind::Corruption: return "corruption";
  }
  return "?";
}

DomainKind parse_domain_kind(const std::string& name) {
  if (name == "identity" || name == "source" || name == "none") return DomainKind::Identity;
  if (name == "randcolor") return DomainKind::RandColor;
  if (name == "augmix") return DomainKind::AugMixStyle;
  if (name == "netperturb") return DomainKind::NetPerturb;
  if (name == "corruption") return DomainKind::Corruption;
  throw std::invalid_argument("unknown domain kind '" + name + "'");
}

DomainSpec parse_domain(const std::string& text) {
  const auto dash = text.rfind('-');
  if (dash != std::string::npos) {
    const std::string sev = text.substr(dash + 1);
    if (sev.size() == 1 && std::isdigit(static_cast<unsigned char>(sev[0]))) {
      return DomainSpec::corrupted(text.substr(0, dash), sev[0] - '0');
    }
  }
  const DomainKind kind = parse_domain_kind(text);
  if (kind == DomainKind::Corruption) throw std::invalid_argument("corruption domains are written <name>-<severity>");
  return DomainSpec::augmentation(kind);
}

void to_json(nlohmann::json& j, const DomainSpec& d) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [k, v] : d.params) params[k] = v;
  if (d.kind == DomainKind::Corruption) {
    params["name"] = d.corruption;
    params["severity"] = d.severity;
  }
  j = {{"kind", to_string(d.kind)}, {"seed", d.seed}, {"params", params}};
}

void from_json(const nlohmann::json& j, DomainSpec& d) {
  d = DomainSpec{};
  d.kind = parse_domain_kind(j.at("kind").get<std::string>());
  d.seed = j.value("seed", std::uint64_t{0});
  const nlohmann::json params = j.value("params", nlohmann::json::object());
  for (const auto& [k, v] : params.items()) {
    if (k == "name" || k == "severity") continue;
    d.params[k] = v.get<double>();
  }
  if (d.kind == DomainKind::Corruption) {
    d.corruption = params.at("name").get<std::string>();
    d.severity = params.at("severity").get<int>();
    corruption_level(d.corruption, d.severity);
  }
}

// ---- color ops ----

std::string to_string(ColorOp op) {
  switch (op) {
    case ColorOp::Identity: return "Identity";
    case ColorOp::AutoContrast: return "AutoContrast";
    case ColorOp::Invert: return "Invert";
    case ColorOp::Equalize: return "Equalize";
    case ColorOp::Solarize: return "Solarize";
    case ColorOp::Posterize: return "Posterize";
    case ColorOp::Color: return "Color";
    case ColorOp::Brightness: return "Brightness";
    case ColorOp::Sharpness: return "Sharpness";
  }
  return "?";
}

Tensor apply_color_op(const Tensor& image, ColorOp op, double magnitude) {
  check_image(image);
  switch (op) {
    case ColorOp::Identity: return image;
    case ColorOp::AutoContrast: return auto_contrast(image);
    case ColorOp::Invert: {
      Tensor out = image;
      for (Real& v : out.data()) v = 1 - v;
      return out;
    }
    case ColorOp::Equalize: return equalize(image);
    case ColorOp::Solarize: {
      // stronger magnitude lowers the threshold; values at or above it are inverted
      const Real threshold = static_cast<Real>(1.0 - magnitude);
      Tensor out = image;
      for (Real& v : out.data()) {
        if (v >= threshold) v = 1 - v;
      }
      return out;
    }
    case ColorOp::Posterize: return posterize(image, magnitude);
    case ColorOp::Color: return clamped(saturation(image, factor_of(magnitude)));
    case ColorOp::Brightness: {
      Tensor out = image;
      const Real f = factor_of(magnitude);
      for (Real& v : out.data()) v = clamp01(v * f);
      return out;
    }
    case ColorOp::Sharpness: return clamped(sharpness(image, factor_of(magnitude)));
  }
  throw std::invalid_argument("unknown color op");
}

std::array<ColorDraw, 2> sample_rand_color(std::uint64_t seed) {
  Rng rng(mix_seed(seed, kRandColorTag));
  std::array<ColorDraw, 2> draws{};
  for (ColorDraw& d : draws) {
    d.op = static_cast<ColorOp>(rng.index(kColorOpCount));
    d.magnitude = rng.uniform();
  }
  return draws;
}

Tensor rand_color_augment(const Tensor& image, std::uint64_t seed) {
  check_image(image);
  Tensor out = image;
  for (const ColorDraw& d : sample_rand_color(seed)) out = apply_color_op(out, d.op, d.magnitude);
  return clamped(std::move(out));
}

// ---- AugMix-style ----

AugMixPlan sample_augmix(std::uint64_t seed, double dirichlet_alpha, double beta_alpha) {
  Rng rng(mix_seed(seed, kAugMixTag));
  AugMixPlan plan;
  if (rng.bernoulli(0.5)) {
    GeometricDraw g{static_cast<GeometricOp>(rng.index(3)), 0};
    g.amount = g.op == GeometricOp::Rotate ? rng.uniform(-15, 15) : rng.uniform(-0.1, 0.1);
    plan.geometric = g;
  }
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t d = 0; d <= k; ++d) {
      plan.chains[k].push_back(ColorDraw{kAugMixPool[rng.index(kAugMixPool.size())], rng.uniform()});
    }
  }
  double total = 0;
  for (double& w : plan.chain_weights) total += w = rng.gamma(dirichlet_alpha);
  for (double& w : plan.chain_weights) w /= total;
  plan.blend = rng.beta(beta_alpha, beta_alpha);
  return plan;
}

AugmentedPair apply_geometric(const Tensor& image, const LabelMask& mask, const GeometricDraw& draw) {
  check_image(image);
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  if (mask.height != h || mask.width != w) throw DimensionError("mask does not match image size");
  AugmentedPair out{Tensor(image.shape(), Real(0.5)), LabelMask{h, w, std::vector<int>(h * w, kIgnoreLabel)}};
  const double cy = (static_cast<double>(h) - 1) / 2;
  const double cx = (static_cast<double>(w) - 1) / 2;
  const double angle = draw.op == GeometricOp::Rotate ? draw.amount * std::numbers::pi / 180 : 0;
  const double shift_x = draw.op == GeometricOp::TranslateX ? draw.amount * static_cast<double>(w) : 0;
  const double shift_y = draw.op == GeometricOp::TranslateY ? draw.amount * static_cast<double>(h) : 0;
  const double cs = std::cos(angle);
  const double sn = std::sin(angle);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // inverse map from output pixel to source pixel
      const double dx = static_cast<double>(x) - cx - shift_x;
      const double dy = static_cast<double>(y) - cy - shift_y;
      const long sx = std::lround(cs * dx + sn * dy + cx);
      const long sy = std::lround(-sn * dx + cs * dy + cy);
      if (sx < 0 || sy < 0 || sx >= static_cast<long>(w) || sy >= static_cast<long>(h)) continue;
      const auto ux = static_cast<std::size_t>(sx);
      const auto uy = static_cast<std::size_t>(sy);
      for (std::size_t c = 0; c < 3; ++c) out.image[(c * h + y) * w + x] = image[(c * h + uy) * w + ux];
      out.mask.at(y, x) = mask.at(uy, ux);
    }
  }
  return out;
}

AugmentedPair apply_augmix(const Tensor& image, const LabelMask& mask, const AugMixPlan& plan) {
  check_image(image);
  AugmentedPair base = plan.geometric ? apply_geometric(image, mask, *plan.geometric) : AugmentedPair{image, mask};
  Tensor mixed(image.shape());
  for (std::size_t k = 0; k < 3; ++k) {
    const Real wk = static_cast<Real>(plan.chain_weights[k]);
    if (wk == 0) continue;
    const Tensor chain = apply_chain(base.image, plan.chains[k]);
    for (std::size_t i = 0; i < mixed.numel(); ++i) mixed[i] += wk * chain[i];
  }
  if (plan.blend == 0) return base;
  base.image = clamped(blend(base.image, mixed, static_cast<Real>(plan.blend)));
  return base;
}

AugmentedPair augmix_style(const Tensor& image, const LabelMask& mask, std::uint64_t seed) {
  return apply_augmix(image, mask, sample_augmix(seed));
}

// ---- network perturbation ----

PerturbNetwork PerturbNetwork::random(std::uint64_t seed) {
  Rng rng(mix_seed(seed, kNetTag));
  PerturbNetwork net;
  const std::array<std::size_t, 4> widths{3, kPerturbHidden, kPerturbHidden, 3};
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t fan_in = widths[l] * 9;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    net.weights[l] = Tensor({widths[l + 1], widths[l], 3, 3});
    for (Real& v : net.weights[l].data()) v = static_cast<Real>(rng.uniform(-bound, bound));
    net.biases[l] = Tensor({widths[l + 1]});
    for (Real& v : net.biases[l].data()) v = static_cast<Real>(rng.uniform(-0.1, 0.1));
  }
  return net;
}

PerturbNetwork PerturbNetwork::identity() {
  PerturbNetwork net;
  const std::array<std::size_t, 4> widths{3, kPerturbHidden, kPerturbHidden, 3};
  for (std::size_t l = 0; l < 3; ++l) {
    net.weights[l] = Tensor({widths[l + 1], widths[l], 3, 3});
    for (std::size_t c = 0; c < std::min(widths[l], widths[l + 1]); ++c) {
      net.weights[l].at({c, c, 1, 1}) = 1;
    }
    net.biases[l] = Tensor({widths[l + 1]});
  }
  return net;
}

PerturbDraw PerturbDraw::random(std::uint64_t seed) {
  Rng rng(mix_seed(seed, kDrawTag));
  PerturbDraw d;
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t c = 0; c < kPerturbHidden; ++c) {
      // log-uniform so shrinking and growing are equally likely
      d.scale[l].push_back(std::exp(rng.uniform(std::log(0.5), std::log(2.0))));
      d.flip[l].push_back(rng.bernoulli(0.1));
      d.drop[l].push_back(rng.bernoulli(0.1));
    }
  }
  return d;
}

PerturbDraw PerturbDraw::neutral() {
  PerturbDraw d;
  for (std::size_t l = 0; l < 2; ++l) {
    d.scale[l].assign(kPerturbHidden, 1.0);
    d.flip[l].assign(kPerturbHidden, false);
    d.drop[l].assign(kPerturbHidden, false);
  }
  return d;
}

Tensor apply_net_perturb(const Tensor& image, const PerturbNetwork& net, const PerturbDraw& draw) {
  check_image(image);
  const Shape batched{1, 3, image.dim(1), image.dim(2)};
  Tensor h = image.reshaped(batched);
  for (std::size_t l = 0; l < 3; ++l) {
    h = conv_layer(h, net.weights[l], net.biases[l]);
    if (l < 2) {
      for (Real& v : h.data()) v = std::max<Real>(v, 0);
      perturb(h, draw, l);
    }
  }
  const auto [lo, hi] = std::minmax_element(h.data().begin(), h.data().end());
  const Real lo_v = *lo;
  const Real span = *hi - *lo;
  Tensor out(image.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const Real normalized = span > Real(1e-12) ? (h[i] - lo_v) / span : Real(0.5);
    out[i] = clamp01(Real(0.5) * normalized + Real(0.5) * image[i]);
  }
  return out;
}

Tensor net_perturb_augment(const Tensor& image, std::uint64_t seed) {
  return apply_net_perturb(image, PerturbNetwork::random(seed), PerturbDraw::random(seed));
}

// ---- corruptions ----

double corruption_level(const std::string& name, int severity) {
  check_severity(name, severity);
  const auto idx = static_cast<std::size_t>(severity);
  if (name == "fog") return std::array<double, 4>{0.0, 0.3, 0.5, 0.7}[idx];
  if (name == "contrast") return std::array<double, 4>{1.0, 0.5, 0.35, 0.2}[idx];
  if (name == "gauss_noise") return std::array<double, 4>{0.0, 0.06, 0.12, 0.2}[idx];
  if (name == "hue_rotate") return std::array<double, 4>{0.0, 60.0, 120.0, 180.0}[idx];
  if (name == "channel_swap") return std::array<double, 4>{0.0, 1.0, 12.0, 2.0}[idx];
  throw std::invalid_argument("unknown corruption '" + name + "'");
}

Tensor corrupt(const Tensor& image, const std::string& name, int severity, std::uint64_t seed) {
  check_image(image);
  const double level = corruption_level(name, severity);
  if (severity == 0) return image;
  const std::size_t plane = image.dim(1) * image.dim(2);
  Tensor out = image;
  if (name == "fog") {
    const auto w = static_cast<Real>(level);
    for (Real& v : out.data()) v = (1 - w) * v + w;
  } else if (name == "contrast") {
    Real mean = 0;
    for (Real v : image.data()) mean += v;
    mean /= static_cast<Real>(image.numel());
    for (Real& v : out.data()) v = mean + static_cast<Real>(level) * (v - mean);
  } else if (name == "gauss_noise") {
    Rng rng(mix_seed(seed, kNoiseTag));
    for (Real& v : out.data()) v = clamp01(v + static_cast<Real>(level * rng.normal()));
  } else if (name == "hue_rotate") {
    const double a = level * std::numbers::pi / 180;
    const double cs = std::cos(a);
    const double sn = std::sin(a);
    for (std::size_t i = 0; i < plane; ++i) {
      const double r = image[i], g = image[plane + i], b = image[2 * plane + i];
      const double y = 0.299 * r + 0.587 * g + 0.114 * b;
      const double ci = 0.596 * r - 0.274 * g - 0.322 * b;
      const double cq = 0.211 * r - 0.523 * g + 0.312 * b;
      const double ri = cs * ci - sn * cq;
      const double rq = sn * ci + cs * cq;
      out[i] = clamp01(static_cast<Real>(y + 0.956 * ri + 0.621 * rq));
      out[plane + i] = clamp01(static_cast<Real>(y - 0.272 * ri - 0.647 * rq));
      out[2 * plane + i] = clamp01(static_cast<Real>(y - 1.106 * ri + 1.703 * rq));
    }
  } else {  // channel_swap
    const auto code = static_cast<std::size_t>(level);
    const std::size_t a = code / 10;
    const std::size_t b = code % 10;
    for (std::size_t i = 0; i < plane; ++i) std::swap(out[a * plane + i], out[b * plane + i]);
  }
  return out;
}

AugmentedPair apply_domain(const DomainSpec& domain, const Tensor& image, const LabelMask& mask,
                           std::uint64_t sample_seed) {
  const std::uint64_t seed = mix_seed(domain.seed, sample_seed);
  switch (domain.kind) {
    case DomainKind::Identity: return {image, mask};
    case DomainKind::RandColor: return {rand_color_augment(image, seed), mask};
    case DomainKind::AugMixStyle: return augmix_style(image, mask, seed);
    case DomainKind::NetPerturb: return {net_perturb_augment(image, seed), mask};
    case DomainKind::Corruption: return {corrupt(image, domain.corruption, domain.severity, seed), mask};
  }
  throw std::invalid_argument("unknown domain kind");
}

}  // namespace instcal
