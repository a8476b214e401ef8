#include <iostream>

#include "carid/cli.hpp"

int main(int argc, char** argv) { return carid::cli::dispatch(argc, argv, std::cout, std::cerr); }
