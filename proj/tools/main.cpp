#include "covtpp/cli.hpp"

int main(int argc, char** argv) { return covtpp::cli_dispatch(argc, argv); }
