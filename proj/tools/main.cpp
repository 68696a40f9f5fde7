// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "mpa/cli.hpp"

int main(int argc, char** argv) {
  return mpa::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
