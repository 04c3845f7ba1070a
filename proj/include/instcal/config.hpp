#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "instcal/harness.hpp"

namespace instcal {

/// Invalid, incomplete or unknown configuration input.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct InstCalSettings {
  std::string variant = "u";  // "u" or "c"
  std::size_t basis_count = kDefaultBasisCount;
  double lr_u = 1e-2;
  double lr_c = 1e-1;
  TrainConfig train;  // lr is filled from lr_u / lr_c

  NormVariant norm_variant() const;
  TrainConfig train_config() const;
};

struct EvalSettings {
  EvalConfig eval;
  std::vector<DomainSpec> domains;
  double manual_m = 0.1;
  std::vector<double> m_values;
  std::vector<std::size_t> batch_sizes;
  std::size_t entropy_steps = 1;
  double entropy_lr = 1e-3;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  SegNetConfig model;
  SceneConfig scene;
  TrainConfig pretrain;
  InstCalSettings instcal;
  EvalSettings eval;
};

/// The built-in configuration, complete and valid.
nlohmann::json default_config();

/// Strict parse: every key must be present and well-typed, unknown keys are
/// rejected. Messages name the offending dotted key.
PipelineConfig parse_config(const nlohmann::json& j);

/// "a.b.c=value" on an existing key. The value is parsed as JSON when
/// possible, otherwise taken as a string; its type must match the old value.
void apply_override(nlohmann::json& config, const std::string& assignment);
/// Sets an existing dotted key to a JSON value with the same type check.
void set_key(nlohmann::json& config, const std::string& dotted_key, const nlohmann::json& value);

/// 64-bit FNV-1a of the canonical (sorted-key, compact) JSON, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);
std::uint64_t fnv1a64(const std::string& bytes);

/// "default" names the weak-only augmentation; the rest are domain kinds.
DomainKind parse_augmentation(const std::string& name);

}  // namespace instcal
