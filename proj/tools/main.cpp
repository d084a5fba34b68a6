// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <iostream>

#include "cli/cli.hpp"

int main(int argc, char** argv) {
  return stproph::cli::run(argc, argv, std::cout, std::cerr, [](const char* name) { return std::getenv(name); });
}
