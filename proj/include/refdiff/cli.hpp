#pragma once

#include <string>
#include <vector>

namespace refdiff {

// the whole command surface, callable in-process for tests. args exclude the
// program name. returns the process exit code: 0 success, 1 usage error,
// 2 runtime error.
int run_cli(const std::vector<std::string>& args);

} // namespace refdiff
