#include <iostream>

#include "iclcal/cli.hpp"

int main(int argc, char** argv) { return iclcal::cli::run(argc, argv, std::cout, std::cerr); }
