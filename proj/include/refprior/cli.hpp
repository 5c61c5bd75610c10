#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace refprior {

/// Runs one `refprior` subcommand. Exit codes: 0 success, 1 contract
/// violation or bad usage, 2 I/O error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace refprior
