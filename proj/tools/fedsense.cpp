#include <iostream>

#include "fedsense/cli.hpp"

int main(int argc, char** argv) {
  fedsense::cli::configure_logging();
  return fedsense::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
