#pragma once

namespace changedet {

// Entry point behind the command-line binary. Returns the process exit code:
// 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
int run_cli(int argc, const char* const* argv);

}  // namespace changedet
