#include "softmask/cli.hpp"

int main(int argc, char** argv) { return softmask::cli::run(argc, argv); }
