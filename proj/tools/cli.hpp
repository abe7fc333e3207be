#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rrca::cli {

/// Runs one command line (without the program name) and returns the process
/// exit code. Normal output goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rrca::cli
