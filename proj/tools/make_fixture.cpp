// Writes the eight-sample fixture dataset used by the tests and examples.

#include <iostream>

#include "fixture.hpp"

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: make_fixture <output-dir>\n";
        return 2;
    }
    try {
        std::cout << kbc::testing::write_fixture(argv[1]).string() << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
