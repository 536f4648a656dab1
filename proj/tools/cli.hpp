#pragma once

#include <iosfwd>

namespace rstereo::cli {

/// Exit codes: 0 success, 1 usage or invalid configuration, 2 file I/O,
/// 3 non-finite numbers or a failed self-check.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rstereo::cli
