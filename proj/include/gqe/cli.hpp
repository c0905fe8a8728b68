#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gqe {

inline constexpr const char* kToolVersion = "0.1.0";

/// Exit codes: 0 success, 1 usage error, 2 data or I/O error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gqe
