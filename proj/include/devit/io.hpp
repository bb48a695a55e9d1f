#pragma once

// DVT1 tensor container: "DVT1" magic, u32 LE rank, rank x u32 LE dims, then
// the payload as f32 LE, row-major. Several records may be concatenated into
// one file; a JSON manifest maps names to byte offsets.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "devit/tensor.hpp"

namespace devit::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kMagic[4] = {'D', 'V', 'T', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("DVT1: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write_dvt(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!os) throw FormatError("DVT1: write failed");
}

inline Tensor read_dvt(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("DVT1: bad magic");
  const std::uint32_t rank = detail::get_u32(is);
  if (rank > kMaxRank) throw FormatError("DVT1: rank " + std::to_string(rank) + " exceeds 5");
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_u32(is);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = static_cast<double>(std::bit_cast<float>(detail::get_u32(is)));
  return Tensor(std::move(shape), std::move(data));
}

inline std::size_t dvt_record_size(const Tensor& t) { return 8 + 4 * t.rank() + 4 * t.numel(); }

inline void save_dvt(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_dvt(os, t);
}

inline Tensor load_dvt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_dvt(is);
}

/// Named tensors packed back to back, plus a manifest:
///   {"format":"DVT1","config_hash":..., "tensors":[{"name","shape","offset"}]}
inline nlohmann::json save_bundle(const std::string& path, const std::map<std::string, Tensor>& tensors,
                                  const std::string& config_hash = "") {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  nlohmann::json manifest;
  manifest["format"] = "DVT1";
  manifest["config_hash"] = config_hash;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    write_dvt(os, t);
    offset += dvt_record_size(t);
  }
  std::ofstream ms(path + ".json");
  if (!ms) throw FormatError("cannot open " + path + ".json for writing");
  ms << manifest.dump(2) << '\n';
  return manifest;
}

inline std::map<std::string, Tensor> load_bundle(const std::string& path, std::string* config_hash = nullptr) {
  std::ifstream ms(path + ".json");
  if (!ms) throw FormatError("missing manifest " + path + ".json");
  nlohmann::json manifest;
  try {
    ms >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest " + path + ".json: " + e.what());
  }
  if (config_hash) *config_hash = manifest.value("config_hash", "");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  std::map<std::string, Tensor> out;
  for (const auto& entry : manifest.at("tensors")) {
    is.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::size_t>()));
    Tensor t = read_dvt(is);
    if (t.shape() != entry.at("shape").get<Shape>())
      throw FormatError("tensor " + entry.at("name").get<std::string>() + " shape disagrees with manifest");
    out.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return out;
}

}  // namespace devit::io
