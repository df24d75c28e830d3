#pragma once

#include <iosfwd>

#include "deltashift/error.hpp"

namespace deltashift::cli {

// Process exit codes.
enum exit_code : int {
    ok = 0,
    usage_error = 2, // also: validation failures
    io_error = 3,    // also: corrupt or truncated containers
    numerical_error = 4,
};

int exit_code_for(error_kind kind);

// Entry point for the `deltashift` tool. Data and written paths go to `out`;
// a failure writes exactly one `ERROR code=<n> msg=...` line to `err`.
int run(int argc, const char * const * argv, std::ostream & out, std::ostream & err);

} // namespace deltashift::cli
