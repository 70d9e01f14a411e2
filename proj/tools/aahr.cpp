#include <aahr/cli.hpp>

#include <iostream>

int main(int argc, char** argv) { return aahr::cli::run(argc, argv, std::cout, std::cerr); }
