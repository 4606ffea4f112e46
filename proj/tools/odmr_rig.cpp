#include "odmr/cli.hpp"

int main(int argc, char** argv) { return odmr::cli::main(argc, argv); }
