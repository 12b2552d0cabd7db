#include <iostream>

#include "loopmdm/cli.hpp"

int main(int argc, char** argv) { return loopmdm::cli_main(argc, argv, std::cout, std::cerr); }
