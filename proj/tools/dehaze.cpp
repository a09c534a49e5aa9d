#include "dehaze/cli.hpp"

int main(int argc, char** argv) { return dehaze::cli::run(argc, argv); }
