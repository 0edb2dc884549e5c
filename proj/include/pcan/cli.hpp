#pragma once

#include <iosfwd>

namespace pcan {

/// Exit codes of the pcanlab front end.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitInternal = 2;

/// Entry point of `pcanlab`, with output streams injected for testing.
int run_cli(int argc, const char *const *argv, std::ostream &out,
            std::ostream &err);

} // namespace pcan
