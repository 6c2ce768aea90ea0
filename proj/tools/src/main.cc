#include <iostream>
#include <string>
#include <vector>

#include "culab/cli/app.h"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return culab::cli::run(args, std::cout, std::cerr);
}
