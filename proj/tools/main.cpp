#include <vector>

#include "mdctr/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mdctr::run_cli(args);
}
