#include "stepwise/cli.hpp"

int main(int argc, char** argv) { return stepwise::run_cli(argc, argv); }
