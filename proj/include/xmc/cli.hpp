#pragma once

#include <string>
#include <vector>

namespace xmc {

// Full command-line driver. args excludes the program name (subcommand
// first). Returns the process exit code: 0 ok, 1 usage, 2 data, 3 state.
int run_command(const std::vector<std::string>& args);

}  // namespace xmc
