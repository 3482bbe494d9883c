#pragma once

#include <iosfwd>

namespace labkit {

// Exit codes: 0 ok, 1 configuration or usage, 2 measurement failure,
// 3 bind or connection failure.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace labkit
