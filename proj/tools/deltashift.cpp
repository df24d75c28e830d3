#include <iostream>

#include "deltashift/cli.hpp"

int main(int argc, char ** argv) {
    return deltashift::cli::run(argc, argv, std::cout, std::cerr);
}
