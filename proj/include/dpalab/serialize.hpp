#ifndef DPALAB_SERIALIZE_HPP
#define DPALAB_SERIALIZE_HPP

// Tensor blob format (little-endian):
//   u32 rank, u32 dims[rank], f64 data[product(dims)]
// A checkpoint is <base>.bin holding blobs back to back and <base>.json
// naming each blob with its shape and byte offset.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dpalab/errors.hpp"
#include "dpalab/tensor.hpp"

namespace dpalab {

namespace detail {

template <typename T>
void put_le(std::ostream& os, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw ConfigError("tensor blob truncated");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (double v : t.data) detail::put_le<double>(os, v);
}

inline Tensor read_tensor(std::istream& is) {
  const auto rank = detail::get_le<std::uint32_t>(is);
  if (rank > 8) throw ConfigError("tensor blob: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_le<std::uint32_t>(is);
  Tensor t(shape);
  for (double& v : t.data) v = detail::get_le<double>(is);
  return t;
}

inline std::size_t blob_size(const Tensor& t) {
  return 4 + 4 * t.rank() + 8 * t.numel();
}

inline void save_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  write_tensor(os, t);
}

inline Tensor load_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  return read_tensor(is);
}

using NamedTensors = std::vector<std::pair<std::string, const Tensor*>>;

inline void save_checkpoint(const std::filesystem::path& base, const NamedTensors& tensors,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::path bin = base;
  bin += ".bin";
  std::filesystem::path side = base;
  side += ".json";
  std::ofstream os(bin, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + bin.string());
  nlohmann::json manifest;
  manifest["format"] = "dpalab-tensors-v1";
  manifest["blob"] = bin.filename().string();
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    write_tensor(os, *t);
    manifest["tensors"].push_back({{"name", name}, {"shape", t->shape}, {"offset", offset}});
    offset += blob_size(*t);
  }
  manifest["extra"] = extra;
  std::ofstream js(side);
  if (!js) throw ConfigError("cannot write " + side.string());
  js << manifest.dump(2) << '\n';
}

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  nlohmann::json extra;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& base) {
  std::filesystem::path side = base;
  side += ".json";
  std::ifstream js(side);
  if (!js) throw ConfigError("cannot read " + side.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint manifest " + side.string() + ": " + e.what());
  }
  std::filesystem::path bin = base.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream is(bin, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + bin.string());
  Checkpoint ck;
  for (const auto& entry : manifest.at("tensors")) {
    is.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::size_t>()));
    Tensor t = read_tensor(is);
    if (t.shape != entry.at("shape").get<Shape>()) {
      throw ConfigError("checkpoint shape mismatch for " + entry.at("name").get<std::string>());
    }
    ck.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  ck.extra = manifest.value("extra", nlohmann::json::object());
  return ck;
}

// FNV-1a over shapes and raw value bytes.
class TensorHasher {
 public:
  void add(const Tensor& t) {
    for (std::size_t d : t.shape) mix(&d, sizeof(d));
    mix(t.data.data(), t.data.size() * sizeof(double));
  }
  void add(const std::string& s) { mix(s.data(), s.size()); }
  std::uint64_t value() const { return h_; }

 private:
  void mix(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001B3ULL;
    }
  }
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

}  // namespace dpalab

#endif  // DPALAB_SERIALIZE_HPP
