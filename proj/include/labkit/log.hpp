#pragma once

#include <cstdio>
#include <deque>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "labkit/clock.hpp"

namespace labkit {

class EventBus;

enum class LogLevel { debug, info, warning, error };

std::string_view to_string(LogLevel level);

struct LogEntry {
  std::string timestamp;  // UTC, millisecond precision
  LogLevel level = LogLevel::info;
  std::string source;
  std::string message;
};

// "<timestamp> <LEVEL> <source> <message>" with newlines and backslashes
// escaped so that every entry is exactly one line.
std::string format_log_line(const LogEntry& entry);

// In-memory ring buffer plus append-only text file. Never throws into the
// caller: a file that cannot be written degrades to memory-only with one
// warning entry.
class Logger {
 public:
  static constexpr std::size_t kCapacity = 10'000;

  explicit Logger(std::optional<std::filesystem::path> file = std::nullopt,
                  Clock clock = system_clock(), EventBus* events = nullptr);
  ~Logger();
  Logger(const Logger&) = delete;
  Logger& operator=(const Logger&) = delete;

  void log(LogLevel level, std::string_view source, std::string_view message) noexcept;

  std::vector<LogEntry> entries() const;
  std::size_t size() const;
  bool file_enabled() const;

 private:
  void append_locked(LogEntry entry);

  mutable std::mutex mutex_;
  Clock clock_;
  EventBus* events_;
  std::FILE* file_ = nullptr;
  std::deque<LogEntry> ring_;
  TimePoint last_{};
};

}  // namespace labkit
