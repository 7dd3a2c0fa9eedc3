#include <iostream>

#include "sparseq/cli.hpp"

int main(int argc, char** argv) { return sparseq::run_cli(argc, argv, std::cout, std::cerr); }
