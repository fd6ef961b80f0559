#include "tiger/cli.hpp"

int main(int argc, char** argv) { return tiger::run_cli(argc, argv); }
