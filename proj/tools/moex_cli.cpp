#include "moex/experiment.hpp"

#include <iostream>

int main(int argc, char** argv) { return moex::run_cli(argc, argv, std::cout, std::cerr); }
