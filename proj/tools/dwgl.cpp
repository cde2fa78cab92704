#include "dwgl/cli.hpp"

int main(int argc, char** argv) { return dwgl::run_cli(argc, argv); }
