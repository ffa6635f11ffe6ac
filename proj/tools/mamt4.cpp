#include "mamt4/cli.hpp"

int main(int argc, char** argv) { return mamt4::cli::run(argc, argv); }
