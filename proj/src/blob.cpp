#include "ien/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ien {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

namespace {

constexpr std::string_view kBlobMagic = "IENT";

template <typename U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U take(std::string_view bytes, std::size_t& offset, const char* what) {
  if (offset + sizeof(U) > bytes.size()) throw CorruptArchive(std::string("truncated while reading ") + what);
  U value;
  std::memcpy(&value, bytes.data() + offset, sizeof(U));
  offset += sizeof(U);
  return value;
}

template <typename T>
constexpr std::uint32_t dtype_code() {
  return std::is_same_v<T, float> ? 0U : 1U;
}

}  // namespace

template <typename T>
void append_blob(std::string& out, const Tensor<T>& tensor) {
  out.append(kBlobMagic);
  put<std::uint32_t>(out, kBlobVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) put<std::uint64_t>(out, d);
  put<std::uint32_t>(out, dtype_code<T>());
  out.append(reinterpret_cast<const char*>(tensor.raw()), tensor.size() * sizeof(T));
}

template <typename T>
Tensor<T> decode_blob(std::string_view bytes, std::size_t& offset) {
  if (offset + 4 > bytes.size() || bytes.substr(offset, 4) != kBlobMagic) {
    throw CorruptArchive("bad tensor blob magic at offset " + std::to_string(offset));
  }
  offset += 4;
  const auto version = take<std::uint32_t>(bytes, offset, "blob version");
  if (version != kBlobVersion) throw CorruptArchive("unsupported blob version " + std::to_string(version));
  const auto ndim = take<std::uint32_t>(bytes, offset, "blob rank");
  if (ndim == 0 || ndim > 8) throw CorruptArchive("implausible blob rank " + std::to_string(ndim));
  Shape shape(ndim);
  std::size_t count = 1;
  for (auto& d : shape) {
    d = take<std::uint64_t>(bytes, offset, "blob dims");
    if (d == 0 || d > (std::size_t{1} << 32)) throw CorruptArchive("implausible blob dimension");
    count *= d;
  }
  const auto dtype = take<std::uint32_t>(bytes, offset, "blob dtype");
  if (dtype != dtype_code<T>()) throw CorruptArchive("blob dtype " + std::to_string(dtype) + " is not the expected type");
  const std::size_t nbytes = count * sizeof(T);
  if (offset + nbytes > bytes.size()) throw CorruptArchive("truncated tensor payload");
  std::vector<T> data(count);
  std::memcpy(data.data(), bytes.data() + offset, nbytes);
  offset += nbytes;
  return Tensor<T>(std::move(shape), std::move(data));
}

std::string encode_archive(std::string_view magic, const Archive& archive) {
  const std::string manifest = archive.manifest.dump();
  std::string out;
  out.reserve(16 + manifest.size() + archive.payload.size());
  out.append(magic);
  put<std::uint32_t>(out, kArchiveVersion);
  put<std::uint64_t>(out, manifest.size());
  out.append(manifest);
  out.append(archive.payload);
  return out;
}

Archive decode_archive(std::string_view magic, std::string_view bytes) {
  if (bytes.size() < magic.size() || bytes.substr(0, magic.size()) != magic) {
    throw CorruptArchive("bad archive magic (expected " + std::string(magic) + ")");
  }
  std::size_t offset = magic.size();
  const auto version = take<std::uint32_t>(bytes, offset, "archive version");
  if (version != kArchiveVersion) throw CorruptArchive("unsupported archive version " + std::to_string(version));
  const auto length = take<std::uint64_t>(bytes, offset, "manifest length");
  if (offset + length > bytes.size()) throw CorruptArchive("truncated manifest");
  Archive archive;
  try {
    archive.manifest = json::parse(bytes.substr(offset, length));
  } catch (const json::exception& e) {
    throw CorruptArchive(std::string("manifest is not valid JSON: ") + e.what());
  }
  offset += length;
  archive.payload.assign(bytes.substr(offset));
  return archive;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

template void append_blob<float>(std::string&, const Tensor<float>&);
template void append_blob<double>(std::string&, const Tensor<double>&);
template Tensor<float> decode_blob<float>(std::string_view, std::size_t&);
template Tensor<double> decode_blob<double>(std::string_view, std::size_t&);

}  // namespace ien
