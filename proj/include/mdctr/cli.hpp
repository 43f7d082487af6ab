#pragma once

#include <string>
#include <vector>

namespace mdctr {

/// Entry point behind the binary. Exit codes: 0 success, 1 validation or
/// configuration error, 2 numerical failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace mdctr
