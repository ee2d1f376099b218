#pragma once

#include <iosfwd>

namespace ien::cli {

// Runs the `ien` command line. Exit codes: 0 success, 1 runtime failure,
// 2 usage or configuration error.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace ien::cli
