#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace serann::cli {

/// Runs the serann command line with `args` (without the program name).
/// Returns the process exit code: 0 iff no per-record failures occurred.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace serann::cli
