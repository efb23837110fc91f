#include "tbfm/cli.hpp"

int main(int argc, char** argv) { return tbfm::cli::run_cli(argc, argv); }
