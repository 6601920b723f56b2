#include "cli/commands.hpp"

int main(int argc, char** argv) { return surelock::cli::run_command(argc, argv); }
