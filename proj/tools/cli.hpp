#pragma once

#include <string>
#include <vector>

namespace instcal::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDiverged = 3;

/// Runs the command line; args excludes the program name.
int run(const std::vector<std::string>& args);

}  // namespace instcal::cli
