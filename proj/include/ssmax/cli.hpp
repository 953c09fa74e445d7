#pragma once

namespace ssx {

// Entry point for the ssmax command-line tool. Exit codes: 0 success,
// 2 usage error, 3 data error, 4 numeric abort.
int run_cli(int argc, const char* const* argv);

}  // namespace ssx
