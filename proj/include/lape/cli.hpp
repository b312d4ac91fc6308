#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lape {

enum ExitCode : int { kExitOk = 0, kExitContract = 1, kExitIo = 2 };

/// Dispatches `lape <subcommand> [flags]`; writes results to `out` and
/// diagnostics and usage to `err`. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lape
