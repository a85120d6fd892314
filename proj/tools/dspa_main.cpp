#include <iostream>

#include "dspa/cli.hpp"

int main(int argc, char** argv) { return dspa::cli::run(argc, argv, std::cout, std::cerr); }
