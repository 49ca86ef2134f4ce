#include "finforge/cli.hpp"

int main(int argc, char** argv) { return finforge::cli::run(std::vector<std::string>(argv, argv + argc)); }
