#include "okd/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return okd::run_cli(argc, argv, std::cout, std::cerr); }
