#include "mfi/cli.hpp"

int main(int argc, char** argv) { return mfi::cli_dispatch(argc, argv); }
