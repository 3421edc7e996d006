#include "llamp/cli.hpp"

int main(int argc, char** argv) { return llamp::run_cli(argc, argv); }
