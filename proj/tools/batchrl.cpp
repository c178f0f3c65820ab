#include "batchrl/cli.hpp"

int main(int argc, char** argv) { return batchrl::run_cli(argc, argv); }
