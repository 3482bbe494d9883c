#include <iostream>

#include "labkit/cli.hpp"

int main(int argc, char** argv) { return labkit::run_cli(argc, argv, std::cout, std::cerr); }
