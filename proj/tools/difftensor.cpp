#include "difftensor/cli.hpp"

int main(int argc, char** argv) { return difftensor::cli::dispatch(argc, argv); }
