#include <iostream>

#include "qdbench/cli.hpp"

int main(int argc, char** argv) { return qdbench::cli::run_command(argc, argv, std::cout, std::cerr); }
