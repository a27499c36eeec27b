#include <iostream>

#include "mmnet/cli.hpp"

int main(int argc, char** argv) {
  return mmnet::cli_main(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
