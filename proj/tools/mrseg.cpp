#include <string>
#include <vector>

#include "mrseg/cli.hpp"

int main(int argc, char** argv) {
    return mrseg::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
