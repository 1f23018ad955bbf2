#include <iostream>
#include <vector>

#include "semdistill/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return semdistill::dispatch(args, std::cout, std::cerr);
}
