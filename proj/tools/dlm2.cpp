#include "commands.hpp"

int main(int argc, char** argv) { return dlm2::cli::run_cli(argc, argv); }
