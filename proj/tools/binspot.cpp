#include "cli.hpp"

int main(int argc, char** argv) { return binspot::cli::run_cli(argc, argv); }
