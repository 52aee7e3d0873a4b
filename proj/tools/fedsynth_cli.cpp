#include <iostream>

#include "fedsynth/cli.hpp"

int main(int argc, char** argv) { return fedsynth::cli::run_cli(argc, argv, std::cout, std::cerr); }
