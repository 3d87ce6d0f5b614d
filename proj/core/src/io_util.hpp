#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace polyreply::detail {

/// Writes to `<path>.tmp.<pid>` and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace polyreply::detail
