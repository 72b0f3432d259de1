#include <string>
#include <vector>

#include "csen/cli.hpp"

int main(int argc, char** argv) {
    return csen::cli_main(std::vector<std::string>(argv + 1, argv + argc));
}
