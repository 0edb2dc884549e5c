#include "pcan/cli.hpp"

#include <iostream>

int main(int argc, char **argv) {
  return pcan::run_cli(argc, argv, std::cout, std::cerr);
}
