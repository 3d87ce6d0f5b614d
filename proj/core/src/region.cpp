#include "polyreply/region.hpp"

#include <algorithm>
#include <cctype>

#include "polyreply/error.hpp"

namespace polyreply {

std::string_view to_string(Region region) {
  switch (region) {
    case Region::kEUR:
      return "EUR";
    case Region::kNAM:
      return "NAM";
    case Region::kLRL:
      return "LRL";
  }
  return "?";
}

Region parse_region(std::string_view text) {
  std::string upper(text);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (upper == "EUR") return Region::kEUR;
  if (upper == "NAM") return Region::kNAM;
  if (upper == "LRL") return Region::kLRL;
  throw InvalidArgument("unknown region '" + std::string(text) + "'");
}

}  // namespace polyreply
