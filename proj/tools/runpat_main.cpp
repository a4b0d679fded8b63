#include "runpat/cli.hpp"

int main(int argc, char** argv) { return runpat::cli::run(argc, argv); }
