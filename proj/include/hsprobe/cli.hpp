#pragma once

#include "hsprobe/error.hpp"

#include <iosfwd>

namespace hsprobe {

// Process exit codes. Stable; documented in the README.
enum ExitCode : int {
    exit_ok = 0,
    exit_other = 1,
    exit_usage = 2,           // unknown flag, missing argument, bad value
    exit_io = 3,              // missing or unreadable file, bind failure
    exit_format = 4,          // corrupt HSDS or checkpoint, non-finite data, failed validate
    exit_one_class = 5,       // degenerate dataset: a split lacks a class
    exit_invalid_argument = 6 // well-formed but inconsistent inputs (dims, modes, ranges)
};

int exit_code_for(ErrorKind kind) noexcept;

// Runs one command line. Results go to `out`; the resolved-config echo and
// diagnostics go to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hsprobe
