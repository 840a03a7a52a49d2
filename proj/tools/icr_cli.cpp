#include "icr/cli.hpp"

int main(int argc, char** argv) { return icr::run_cli(argc, argv); }
