#include "meshpop/cli.hpp"

int main(int argc, char** argv) { return meshpop::cli::run_cli(argc, argv); }
