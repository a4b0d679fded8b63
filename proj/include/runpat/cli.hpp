#pragma once

#include <string>
#include <vector>

namespace runpat::cli {

// Full argv including the program name. Returns the process exit code:
// 0 success, 2 usage error, 3 data error, 4 numerical error. Failures print
// one machine-readable JSON object to stderr.
int run(std::vector<std::string> argv);
int run(int argc, const char* const* argv);

}  // namespace runpat::cli
