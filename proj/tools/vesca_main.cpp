#include <iostream>

#include "vesca/pipeline.hpp"

int main(int argc, char** argv) { return vesca::run_cli(argc, argv, std::cout, std::cerr); }
