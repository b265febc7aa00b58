#include "hpt/cli.hpp"

int main(int argc, char** argv) { return hpt::cli::run(argc, argv); }
