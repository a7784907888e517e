#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace aft::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

/// Runs one `aft` subcommand. `args` excludes the program name.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aft::cli
