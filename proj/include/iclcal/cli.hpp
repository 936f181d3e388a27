#pragma once

#include <iosfwd>

namespace iclcal::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitBackend = 3;

/// Entry point for the `iclcal` tool; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace iclcal::cli
