#pragma once

#include <string>
#include <vector>

namespace ssae {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumerical = 4;

/// Subcommands: gen, train, eval, geometry, flops, gradcheck,
/// export-features. Returns the process exit code; errors go to stderr.
int run(int argc, char** argv);

/// Same, with arguments after the program name.
int run(std::vector<std::string> args);

}  // namespace ssae
