#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <string_view>

namespace labkit {

using TimePoint = std::chrono::system_clock::time_point;

// Wall-clock source. Injected everywhere a timestamp ends up in output so that
// runs can be made byte-reproducible with a pinned time.
using Clock = std::function<TimePoint()>;

Clock system_clock();
Clock fixed_clock(TimePoint at);

// "2025-01-01T00:00:00.000Z"
std::string format_iso8601_ms(TimePoint t);
// "20250101-000000"
std::string format_compact(TimePoint t);
// Accepts "YYYY-MM-DDTHH:MM:SS[.fff]Z"; throws Precondition otherwise.
TimePoint parse_iso8601(std::string_view text);

}  // namespace labkit
