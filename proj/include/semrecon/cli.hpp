#pragma once

#include <string>
#include <vector>

namespace semrecon::cli {

// Full command-line interface. Returns the process exit code:
// 0 success, 1 usage/validation, 2 numerical divergence, 3 I/O.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

}  // namespace semrecon::cli
