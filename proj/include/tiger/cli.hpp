#pragma once

/// @file cli.hpp
/// @brief The `tiger` command line: generate, curate, train, index, query,
/// eval and dump-embeddings.

#include <string>
#include <vector>

namespace tiger {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitIo = 3, kExitNumeric = 4 };

/// Runs one subcommand. Never throws; failures map to exit codes.
int run_cli(int argc, const char* const* argv);
/// Convenience overload; args excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace tiger
