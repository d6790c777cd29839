#include "hsprobe/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    return hsprobe::run_cli(argc, argv, std::cout, std::cerr);
}
