#include "ssmax/cli.hpp"

int main(int argc, char** argv) { return ssx::run_cli(argc, argv); }
