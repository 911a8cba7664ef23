#include "semrecon/cli.hpp"

int main(int argc, char** argv) { return semrecon::cli::run(argc, argv); }
