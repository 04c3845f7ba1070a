#include "instcal/config.hpp"

#include <cstdio>
#include <set>

namespace instcal {
namespace {

// Reads the keys of one JSON object and rejects any it did not read.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config key '" + display() + "' must be an object");
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError("missing required config key '" + join(key) + "'");
    return j_.at(key);
  }

  template <typename T>
  T get(const std::string& key) {
    const nlohmann::json& v = raw(key);
    try {
      return v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + join(key) + "' has the wrong type (" + v.dump() + ")");
    }
  }

  double number(const std::string& key) {
    const nlohmann::json& v = raw(key);
    if (!v.is_number()) throw ConfigError("config key '" + join(key) + "' must be a number");
    return v.get<double>();
  }

  std::uint64_t count(const std::string& key) {
    const nlohmann::json& v = raw(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw ConfigError("config key '" + join(key) + "' must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

  Section child(const std::string& key) { return Section(raw(key), join(key)); }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + join(k) + "'");
    }
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

TrainConfig read_train(Section& s, bool with_lr, std::uint64_t seed) {
  TrainConfig t;
  if (with_lr) t.lr = s.number("lr");
  t.poly_power = s.number("poly_power");
  t.total_iters = s.count("total_iters");
  t.momentum = s.number("momentum");
  t.weight_decay = s.number("weight_decay");
  t.batch_size = s.count("batch_size");
  const std::string aug = s.get<std::string>("augmentation");
  try {
    t.augmentation = parse_augmentation(aug);
  } catch (const std::invalid_argument&) {
    throw ConfigError("config key '" + s.join("augmentation") + "' has unknown value '" + aug + "'");
  }
  t.seed = seed;
  return t;
}

void validate_train(const TrainConfig& t, const std::string& path) {
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

nlohmann::json* walk(nlohmann::json& config, const std::string& dotted_key) {
  nlohmann::json* node = &config;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty() || !node->is_object() || !node->contains(part)) {
      throw ConfigError("unknown config key '" + dotted_key + "'");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) return node;
    start = dot + 1;
  }
}

bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number_integer()) return b.is_number_integer();
  if (a.is_number_float()) return b.is_number();
  return a.type() == b.type();
}

}  // namespace

NormVariant InstCalSettings::norm_variant() const {
  if (variant == "u") return InstCalU{};
  if (variant == "c") return InstCalC{basis_count};
  throw ConfigError("instcal.variant must be 'u' or 'c', got '" + variant + "'");
}

TrainConfig InstCalSettings::train_config() const {
  TrainConfig t = train;
  t.lr = variant == "c" ? lr_c : lr_u;
  return t;
}

DomainKind parse_augmentation(const std::string& name) {
  if (name == "default") return DomainKind::Identity;
  const DomainKind k = parse_domain_kind(name);
  if (k == DomainKind::Corruption) throw std::invalid_argument("corruptions are not training augmentations");
  return k;
}

nlohmann::json default_config() {
  nlohmann::json domains = nlohmann::json::array({"source"});
  for (const std::string& name : corruption_names()) {
    for (int s = 1; s <= 3; ++s) domains.push_back(name + "-" + std::to_string(s));
  }
  return {
      {"seed", 0},
      {"model", SegNetConfig{}},
      {"scene", {{"size", 64}, {"min_shapes", 2}, {"max_shapes", 5}}},
      {"pretrain",
       {{"lr", 0.05},
        {"poly_power", 0.9},
        {"total_iters", 1000},
        {"momentum", 0.9},
        {"weight_decay", 5e-4},
        {"batch_size", 8},
        {"augmentation", "default"}}},
      {"instcal",
       {{"variant", "u"},
        {"basis_count", kDefaultBasisCount},
        {"lr_u", 1e-2},
        {"lr_c", 1e-1},
        {"poly_power", 0.9},
        {"total_iters", 4000},
        {"momentum", 0.9},
        {"weight_decay", 5e-4},
        {"batch_size", 1},
        {"augmentation", "netperturb"}}},
      {"eval",
       {{"seed", 0},
        {"n_images", 200},
        {"n_bins", 15},
        {"domains", domains},
        {"manual_m", 0.1},
        {"m_values", default_m_values()},
        {"batch_sizes", {1, 2, 4, 8, 16}},
        {"entropy_steps", 1},
        {"entropy_lr", 1e-3}}},
  };
}

PipelineConfig parse_config(const nlohmann::json& j) {
  PipelineConfig c;
  Section root(j, "");
  c.seed = root.count("seed");

  Section model = root.child("model");
  c.model.widths = model.get<std::vector<std::size_t>>("widths");
  c.model.in_channels = model.count("in_channels");
  c.model.n_classes = model.count("n_classes");
  c.model.mlp_hidden = model.count("mlp_hidden");
  model.finish();
  try {
    c.model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (c.model.in_channels != 3 || c.model.n_classes != kNumClasses) {
    throw ConfigError("model: the benchmark needs 3 input channels and " + std::to_string(kNumClasses) + " classes");
  }

  Section scene = root.child("scene");
  c.scene.size = scene.count("size");
  c.scene.min_shapes = scene.count("min_shapes");
  c.scene.max_shapes = scene.count("max_shapes");
  scene.finish();
  if (c.scene.size < 16 || c.scene.size % 4 != 0) throw ConfigError("scene.size must be a multiple of 4, at least 16");
  if (c.scene.min_shapes > c.scene.max_shapes) throw ConfigError("scene.min_shapes exceeds scene.max_shapes");

  Section pre = root.child("pretrain");
  c.pretrain = read_train(pre, true, c.seed);
  pre.finish();
  validate_train(c.pretrain, "pretrain");

  Section ic = root.child("instcal");
  c.instcal.variant = ic.get<std::string>("variant");
  c.instcal.basis_count = ic.count("basis_count");
  c.instcal.lr_u = ic.number("lr_u");
  c.instcal.lr_c = ic.number("lr_c");
  c.instcal.train = read_train(ic, false, c.seed);
  ic.finish();
  (void)c.instcal.norm_variant();
  if (c.instcal.basis_count < 1) throw ConfigError("instcal.basis_count must be at least 1");
  validate_train(c.instcal.train_config(), "instcal");

  Section ev = root.child("eval");
  c.eval.eval.seed = ev.count("seed");
  c.eval.eval.n_images = ev.count("n_images");
  c.eval.eval.n_bins = ev.count("n_bins");
  c.eval.eval.scene = c.scene;
  for (const std::string& d : ev.get<std::vector<std::string>>("domains")) {
    try {
      c.eval.domains.push_back(parse_domain(d));
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config key 'eval.domains' has unknown domain '" + d + "': " + e.what());
    }
  }
  c.eval.manual_m = ev.number("manual_m");
  c.eval.m_values = ev.get<std::vector<double>>("m_values");
  c.eval.batch_sizes = ev.get<std::vector<std::size_t>>("batch_sizes");
  c.eval.entropy_steps = ev.count("entropy_steps");
  c.eval.entropy_lr = ev.number("entropy_lr");
  ev.finish();
  if (c.eval.eval.n_images < 1) throw ConfigError("eval.n_images must be at least 1");
  if (c.eval.eval.n_bins < 1) throw ConfigError("eval.n_bins must be at least 1");
  if (c.eval.domains.empty()) throw ConfigError("eval.domains must not be empty");
  for (std::size_t b : c.eval.batch_sizes) {
    if (b == 0) throw ConfigError("eval.batch_sizes entries must be positive");
  }
  root.finish();
  return c;
}

void set_key(nlohmann::json& config, const std::string& dotted_key, const nlohmann::json& value) {
  nlohmann::json* node = walk(config, dotted_key);
  if (!same_kind(*node, value)) {
    throw ConfigError("config key '" + dotted_key + "' expects " + std::string(node->type_name()) + ", got " +
                      value.dump());
  }
  *node = value;
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set_key(config, key, value);
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const nlohmann::json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

}  // namespace instcal
