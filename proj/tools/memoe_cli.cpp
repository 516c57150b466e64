#include "memoe/cli_io.hpp"

int main(int argc, char** argv) { return memoe::run_cli(argc, argv); }
