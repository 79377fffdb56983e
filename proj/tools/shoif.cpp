#include "shoif/cli.hpp"

int main(int argc, char** argv) { return shoif::run_cli(argc, argv); }
