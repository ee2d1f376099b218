#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "ien/tensor.hpp"

namespace ien {

using json = nlohmann::json;

// Tensor blob:
//   "IENT" | u32 version | u32 ndim | u64 dims[ndim] | u32 dtype | payload
// dtype 0 = float32, 1 = float64; all little-endian, payload row-major.
inline constexpr std::uint32_t kBlobVersion = 1;

template <typename T>
void append_blob(std::string& out, const Tensor<T>& tensor);

template <typename T>
std::string encode_blob(const Tensor<T>& tensor) {
  std::string out;
  append_blob(out, tensor);
  return out;
}

// Decodes the blob starting at `offset`; advances offset past it.
// Throws CorruptArchive on bad magic, truncation, or a dtype mismatch.
template <typename T>
Tensor<T> decode_blob(std::string_view bytes, std::size_t& offset);

template <typename T>
Tensor<T> decode_blob(std::string_view bytes) {
  std::size_t offset = 0;
  Tensor<T> t = decode_blob<T>(bytes, offset);
  if (offset != bytes.size()) throw CorruptArchive("trailing bytes after tensor blob");
  return t;
}

// Container used by dataset and checkpoint files:
//   magic[4] | u32 version | u64 manifest_length | manifest JSON | payload
// Blob offsets stored in the manifest are relative to the payload start.
struct Archive {
  json manifest;
  std::string payload;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

std::string encode_archive(std::string_view magic, const Archive& archive);
Archive decode_archive(std::string_view magic, std::string_view bytes);

void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace ien
