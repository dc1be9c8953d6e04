#pragma once

#include <iosfwd>

namespace amalgam::cli {

enum ExitCode : int { ok = 0, usage_error = 1, validation_error = 2, io_error = 3 };

// Full command-line driver. Diagnostics go to `err` as one line: `ERROR <exit code> <kind>: <message>`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace amalgam::cli
