#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace culab::cli {

// Exit statuses of the culab command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

// Runs one culab command. argv[0] is the program name.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace culab::cli
