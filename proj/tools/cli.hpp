#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace katrec::cli {

/// Runs one command line (args[0] is the program name). Errors are reported
/// on `err` as a single JSON object and turn into a nonzero status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace katrec::cli
