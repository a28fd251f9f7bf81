#include <string>
#include <vector>

#include "xmc/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return xmc::run_command(args);
}
