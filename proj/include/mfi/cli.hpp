#pragma once

#include <ostream>
#include <span>
#include <string>

namespace mfi {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumerical = 2;

/// Runs one subcommand. `args` excludes the program name.
int cli_dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err);
int cli_dispatch(int argc, const char* const* argv);

std::string cli_usage();

}  // namespace mfi
