#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace polyreply::detail {

inline constexpr int kContainerFormatVersion = 1;

struct ContainerTensor {
  std::string name;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  bool frozen = false;
  std::vector<float> data;
};

/// File layout: 8-byte magic, u64 little-endian manifest length, JSON manifest,
/// then the little-endian float32 blob. The manifest records each tensor's name,
/// shape, frozen flag and blob offset, plus the blob's CRC-32.
void write_container(const std::filesystem::path& path, const std::string& kind,
                     const nlohmann::json& meta, const std::vector<ContainerTensor>& tensors);

struct Container {
  nlohmann::json meta;
  std::vector<ContainerTensor> tensors;
};

/// Throws DataError on bad magic, version or kind mismatch, truncation, or checksum failure.
Container read_container(const std::filesystem::path& path, const std::string& expected_kind);

}  // namespace polyreply::detail
