#include <string>
#include <vector>

#include "pfsam/run.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return pfsam::run::run_cli(std::move(args));
}
