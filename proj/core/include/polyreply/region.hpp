#pragma once

#include <string>
#include <string_view>

namespace polyreply {

/// Data-residency cluster. Raw pairs never leave the region they were stored in.
enum class Region { kEUR, kNAM, kLRL };

using LanguageTag = std::string;

std::string_view to_string(Region region);

/// Parses "EUR", "NAM" or "LRL" (case-insensitive). Throws InvalidArgument otherwise.
Region parse_region(std::string_view text);

}  // namespace polyreply
