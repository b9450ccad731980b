#include <vector>

#include "proteus/cli.hpp"

int main(int argc, char** argv) {
    return proteus::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
