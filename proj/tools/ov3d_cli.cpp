#include <iostream>

#include "ov3d/cli.hpp"

int main(int argc, char** argv) { return ov3d::run_cli(argc, argv, std::cout, std::cerr); }
