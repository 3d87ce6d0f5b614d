#include "container.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>

#include "io_util.hpp"
#include "polyreply/error.hpp"

namespace polyreply::detail {
namespace {

constexpr char kMagic[8] = {'P', 'L', 'Y', 'R', 'C', 'N', 'T', '1'};

void put_u64(std::string& out, std::uint64_t value) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t value = 0;
  for (int i = 0; i < 8; ++i) {
    value |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  return value;
}

void put_f32(std::string& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const char* in) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) {
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  }
  return std::bit_cast<float>(bits);
}

std::uint32_t crc_of(const char* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void write_container(const std::filesystem::path& path, const std::string& kind,
                     const nlohmann::json& meta, const std::vector<ContainerTensor>& tensors) {
  std::string blob;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& tensor : tensors) {
    if (static_cast<std::int64_t>(tensor.data.size()) != tensor.rows * tensor.cols) {
      throw InvalidArgument("tensor " + tensor.name + " data does not match its shape");
    }
    entries.push_back({{"name", tensor.name},
                       {"shape", {tensor.rows, tensor.cols}},
                       {"frozen", tensor.frozen},
                       {"offset", offset}});
    for (const float v : tensor.data) put_f32(blob, v);
    offset += tensor.data.size();
  }
  const nlohmann::json manifest{{"format_version", kContainerFormatVersion},
                                {"kind", kind},
                                {"meta", meta},
                                {"tensors", entries},
                                {"blob_bytes", blob.size()},
                                {"blob_crc32", crc_of(blob.data(), blob.size())}};
  const std::string manifest_text = manifest.dump();
  std::string bytes(kMagic, sizeof(kMagic));
  put_u64(bytes, manifest_text.size());
  bytes += manifest_text;
  bytes += blob;
  write_file_atomic(path, bytes);
}

Container read_container(const std::filesystem::path& path, const std::string& expected_kind) {
  const std::string bytes = read_file(path);
  const std::string where = " (" + path.string() + ")";
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError("not a container file or truncated header" + where);
  }
  const std::uint64_t manifest_size = get_u64(bytes, 8);
  if (manifest_size > bytes.size() - 16) throw DataError("truncated manifest" + where);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16,
                                     bytes.begin() + 16 + static_cast<std::ptrdiff_t>(manifest_size));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt manifest: ") + e.what() + where);
  }

  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kContainerFormatVersion) {
      throw DataError("unsupported format version " + std::to_string(version) + where);
    }
    if (manifest.at("kind").get<std::string>() != expected_kind) {
      throw DataError("expected a " + expected_kind + " container, found " +
                      manifest.at("kind").get<std::string>() + where);
    }
    const std::size_t blob_start = 16 + manifest_size;
    const auto blob_bytes = manifest.at("blob_bytes").get<std::uint64_t>();
    if (bytes.size() - blob_start != blob_bytes) {
      throw DataError("blob is " + std::to_string(bytes.size() - blob_start) + " bytes, manifest says " +
                      std::to_string(blob_bytes) + where);
    }
    if (crc_of(bytes.data() + blob_start, blob_bytes) != manifest.at("blob_crc32").get<std::uint32_t>()) {
      throw DataError("blob checksum mismatch" + where);
    }

    Container container;
    container.meta = manifest.at("meta");
    const std::uint64_t floats = blob_bytes / 4;
    for (const auto& entry : manifest.at("tensors")) {
      ContainerTensor tensor;
      tensor.name = entry.at("name").get<std::string>();
      tensor.rows = entry.at("shape").at(0).get<std::int64_t>();
      tensor.cols = entry.at("shape").at(1).get<std::int64_t>();
      tensor.frozen = entry.at("frozen").get<bool>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (tensor.rows < 0 || tensor.cols < 0) throw DataError("negative shape for " + tensor.name + where);
      const auto count = static_cast<std::uint64_t>(tensor.rows * tensor.cols);
      if (offset > floats || count > floats - offset) {
        throw DataError("tensor " + tensor.name + " lies outside the blob" + where);
      }
      tensor.data.resize(count);
      const char* base = bytes.data() + blob_start + offset * 4;
      for (std::uint64_t i = 0; i < count; ++i) tensor.data[i] = get_f32(base + 4 * i);
      container.tensors.push_back(std::move(tensor));
    }
    return container;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("incomplete manifest: ") + e.what() + where);
  }
}

}  // namespace polyreply::detail
