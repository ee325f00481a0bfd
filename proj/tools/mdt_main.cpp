#include "mdt/cli.hpp"

int main(int argc, char** argv) { return mdt::cli_dispatch(argc, argv); }
