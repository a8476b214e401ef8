#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace carid::cli {

enum ExitCode : int { kOk = 0, kOperationalError = 1, kUsageError = 2 };

/// Parses argv (argv[0] is the program name) and runs one subcommand.
/// Diagnostics go to `err`; results and help text to `out`.
int dispatch(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace carid::cli
