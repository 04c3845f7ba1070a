#include "instcal/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace instcal {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  throw CheckpointError("unsupported dtype '" + s + "'");
}

template <typename T>
void write_values(std::ostream& out, const Tensor& t) {
  std::vector<T> buf(t.numel());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<T>(t[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(T)));
}

template <typename T>
void read_values(std::istream& in, Tensor& t, const std::string& name) {
  std::vector<T> buf(t.numel());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(T)));
  if (!in) throw CheckpointError("truncated payload for array '" + name + "'");
  for (std::size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<Real>(buf[i]);
}

}  // namespace

const ArrayEntry* Checkpoint::find(const std::string& name) const {
  auto it = std::find_if(arrays.begin(), arrays.end(), [&](const ArrayEntry& e) { return e.name == name; });
  return it == arrays.end() ? nullptr : &*it;
}

const ArrayEntry& Checkpoint::at(const std::string& name) const {
  if (const ArrayEntry* e = find(name)) return *e;
  throw CheckpointError("checkpoint has no array named '" + name + "'");
}

void Checkpoint::add(std::string name, Tensor tensor, bool trainable) {
  if (find(name)) throw CheckpointError("duplicate array name '" + name + "'");
  arrays.push_back(ArrayEntry{std::move(name), std::move(tensor), trainable});
}

void Checkpoint::write(std::ostream& out) const {
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["metadata"] = metadata;
  manifest["arrays"] = nlohmann::json::array();
  for (const ArrayEntry& e : arrays) {
    manifest["arrays"].push_back(
        {{"name", e.name}, {"dtype", dtype_name(e.dtype)}, {"shape", e.tensor.shape()}, {"trainable", e.trainable}});
  }
  const std::string text = manifest.dump();
  const std::uint64_t length = text.size();
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const ArrayEntry& e : arrays) {
    if (e.dtype == DType::F32) {
      write_values<float>(out, e.tensor);
    } else {
      write_values<double>(out, e.tensor);
    }
  }
  if (!out) throw CheckpointError("failed writing checkpoint");
}

Checkpoint Checkpoint::read(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError("not an INSTCAL1 checkpoint (bad magic)");
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || length > (1ULL << 30)) throw CheckpointError("corrupt manifest length");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw CheckpointError("truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("manifest is not valid JSON: ") + e.what());
  }
  Checkpoint ck;
  ck.metadata = manifest.value("metadata", nlohmann::json::object());
  for (const auto& entry : manifest.at("arrays")) {
    ArrayEntry e;
    e.name = entry.at("name").get<std::string>();
    e.dtype = parse_dtype(entry.at("dtype").get<std::string>());
    e.trainable = entry.value("trainable", false);
    e.tensor = Tensor(entry.at("shape").get<Shape>());
    if (e.dtype == DType::F32) {
      read_values<float>(in, e.tensor, e.name);
    } else {
      read_values<double>(in, e.tensor, e.name);
    }
    ck.arrays.push_back(std::move(e));
  }
  return ck;
}

std::string Checkpoint::to_bytes() const {
  std::ostringstream os(std::ios::binary);
  write(os);
  return os.str();
}

Checkpoint Checkpoint::from_bytes(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read(is);
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  write(out);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  return read(in);
}

std::vector<std::string> changed_arrays(const Checkpoint& a, const Checkpoint& b) {
  std::set<std::string> changed;
  for (const ArrayEntry& e : a.arrays) {
    const ArrayEntry* other = b.find(e.name);
    if (!other || !bitwise_equal(e.tensor, other->tensor)) changed.insert(e.name);
  }
  for (const ArrayEntry& e : b.arrays) {
    if (!a.find(e.name)) changed.insert(e.name);
  }
  return {changed.begin(), changed.end()};
}

}  // namespace instcal
