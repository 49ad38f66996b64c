#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gau::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Parses and runs one subcommand: train, eval-lengths, analyze, bench or
// count-params. `args` excludes the program name. Returns the exit code;
// diagnostics go to `err`, progress and tables to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace gau::cli
