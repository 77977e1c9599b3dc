#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace savekit::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kUsage = 2,
    kInvalidConfig = 3,
    kMissingDependency = 4,
    kModuleError = 5,
};

/// Runs one `savekit` invocation. args excludes the program name. Human
/// output goes to `out`, log events to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace savekit::cli
