#ifndef DCV_HARNESS_HPP
#define DCV_HARNESS_HPP

// dcvlab command-line surface. Lives in the library so tests can drive it
// in-process.
//
// Exit codes: 0 success, 1 other failure, 2 config/shape/input error,
// 3 numeric divergence, 4 adaptation stage ordering violation.

#include <iosfwd>
#include <string>
#include <vector>

namespace dcv::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitOrdering = 4;

/// args excludes the program name, e.g. {"speedup", "--config", "c.json", "--out", "runs/s"}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace dcv::cli

#endif  // DCV_HARNESS_HPP
