#include "corebody/cli.hpp"

int main(int argc, char** argv) { return corebody::run_cli(argc, argv); }
