#include "changedet/cli.hpp"

int main(int argc, char** argv) { return changedet::run_cli(argc, argv); }
