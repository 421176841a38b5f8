#include "mimg/cli.hpp"

int main(int argc, char** argv) { return mimg::cli_main(argc, argv); }
