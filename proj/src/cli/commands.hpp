#pragma once
namespace surelock::cli { int run_command(int argc, char** argv); }
