#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace microdet {

// Exit codes of every command.
enum ExitCode : int { kExitOk = 0, kExitVerifyFailed = 1, kExitUsage = 2 };

// Runs one command; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace microdet
