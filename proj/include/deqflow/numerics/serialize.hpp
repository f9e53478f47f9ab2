#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deqflow/numerics/tensor.hpp"

namespace deqflow {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using NamedTensor = std::pair<std::string, Tensor>;

// Checkpoint directory layout:
//   manifest.json  [{"name": ..., "shape": [...], "offset": <element index>}, ...]
//   weights.bin    little-endian float64 values, concatenated in manifest order
namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
  return r;
}

}  // namespace detail

inline void save_tensors(const std::filesystem::path& dir, const std::vector<NamedTensor>& tensors) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  std::ofstream blob(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw FormatError("cannot open " + (dir / "weights.bin").string());
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    for (double v : t.values()) {
      const std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
      blob.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    offset += t.size();
  }
  std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
}

inline std::vector<NamedTensor> load_tensors(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest.json: ") + e.what());
  }
  std::ifstream blob(dir / "weights.bin", std::ios::binary);
  if (!blob) throw FormatError("missing weights.bin in " + dir.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  if (bytes.size() % 8 != 0) throw FormatError("weights.bin length is not a multiple of 8");
  const std::size_t total = bytes.size() / 8;

  std::vector<NamedTensor> out;
  for (const auto& entry : manifest) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n > total) throw FormatError("tensor '" + name + "' extends past weights.bin");
    Vec data(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + 8 * (offset + i), sizeof bits);
      data[i] = std::bit_cast<double>(detail::to_le(bits));
    }
    out.emplace_back(name, Tensor(shape, std::move(data)));
  }
  return out;
}

}  // namespace deqflow
