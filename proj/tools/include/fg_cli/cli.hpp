#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fg::cli {

/// Runs one `fg` invocation (args exclude the program name) and returns the
/// process exit code: 0 ok, 2 config, 3 numeric, 4 I/O, 1 anything else.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args);

}  // namespace fg::cli
