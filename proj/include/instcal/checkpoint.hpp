#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "instcal/tensor.hpp"

namespace instcal {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { F32, F64 };

struct ArrayEntry {
  std::string name;
  Tensor tensor;
  bool trainable = false;
  DType dtype = sizeof(Real) == 4 ? DType::F32 : DType::F64;
};

/// Named-array container.
///
/// Layout: the 8 bytes "INSTCAL1", a little-endian uint64 manifest length, the
/// manifest as UTF-8 JSON {"format", "metadata", "arrays": [{name, dtype,
/// shape, trainable}]}, then each array's raw little-endian payload in
/// manifest order.
struct Checkpoint {
  static constexpr char kMagic[9] = "INSTCAL1";

  nlohmann::json metadata = nlohmann::json::object();
  std::vector<ArrayEntry> arrays;

  const ArrayEntry* find(const std::string& name) const;
  const ArrayEntry& at(const std::string& name) const;
  void add(std::string name, Tensor tensor, bool trainable);

  void write(std::ostream& out) const;
  static Checkpoint read(std::istream& in);
  std::string to_bytes() const;
  static Checkpoint from_bytes(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

/// Names whose shape or payload bytes differ, plus names present in only one
/// checkpoint. Sorted.
std::vector<std::string> changed_arrays(const Checkpoint& a, const Checkpoint& b);

}  // namespace instcal
