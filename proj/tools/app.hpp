#pragma once

#include <iosfwd>

namespace polyreply::app {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kDataError = 2,
  kNumericalError = 3,
};

/// Entry point of the `polyreply` command. Streams default to std::cin/cout/cerr.
int run(int argc, const char* const* argv);
int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace polyreply::app
