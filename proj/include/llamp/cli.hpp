#pragma once

namespace llamp {

// Entry point behind the llamp binary. Exit codes: 0 success, 1 runtime or
// data error, 2 usage error.
int run_cli(int argc, const char* const* argv);

}  // namespace llamp
