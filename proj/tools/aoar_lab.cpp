#include <iostream>

#include "aoar/cli.hpp"

int main(int argc, char** argv) {
    return aoar::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
