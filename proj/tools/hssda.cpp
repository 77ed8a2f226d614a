#include "hssda/cli.hpp"

int main(int argc, char** argv) { return hssda::run_cli(argc, argv); }
