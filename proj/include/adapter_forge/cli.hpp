// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "adapter_forge/error.hpp"

namespace adapter_forge::cli {

/// Exit statuses, stable for scripting.
enum ExitCode : int {
    kOk = 0,
    kIoOrFormat = 2,
    kRecipePrecondition = 3,
    kFlagged = 4,
    kVerificationFailed = 5,
};

int exit_code_for(ErrorCode code);

/// Runs one command line (args[0] is the program name). Reports go to out,
/// diagnostics to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace adapter_forge::cli
