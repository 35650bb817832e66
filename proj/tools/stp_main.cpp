#include "stp/harness.hpp"

int main(int argc, char** argv) { return stp::cli_main(argc, argv); }
