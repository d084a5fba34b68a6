// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>

#include "stproph/trainer/run_config.hpp"

namespace stproph::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 1,
  kDataError = 2,
  kNumericalError = 3,
  kGradCheckFailed = 4,
};

/// Runs one command. Diagnostics go to `err`, reports to `out`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const trainer::EnvLookup& env);

}  // namespace stproph::cli
