#include "labkit/log.hpp"

#include <algorithm>

#include "labkit/events.hpp"

namespace labkit {

std::string_view to_string(LogLevel level) {
  switch (level) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warning: return "warning";
    case LogLevel::error: return "error";
  }
  return "info";
}

namespace {

std::string upper(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return out;
}

std::string escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\\': out += "\\\\"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string format_log_line(const LogEntry& entry) {
  return entry.timestamp + ' ' + upper(to_string(entry.level)) + ' ' + escape(entry.source) + ' ' +
         escape(entry.message);
}

Logger::Logger(std::optional<std::filesystem::path> file, Clock clock, EventBus* events)
    : clock_(std::move(clock)), events_(events) {
  if (file) {
    std::error_code ec;
    if (file->has_parent_path()) std::filesystem::create_directories(file->parent_path(), ec);
    file_ = std::fopen(file->c_str(), "a");
    if (!file_)
      log(LogLevel::warning, "kernel",
          "cannot open log file " + file->string() + "; logging to memory only");
  }
}

Logger::~Logger() {
  if (file_) std::fclose(file_);
}

void Logger::log(LogLevel level, std::string_view source, std::string_view message) noexcept {
  try {
    LogEntry entry;
    {
      std::lock_guard lock(mutex_);
      // Timestamps never go backwards within one stream.
      last_ = std::max(last_, clock_());
      entry = LogEntry{format_iso8601_ms(last_), level, std::string(source), std::string(message)};
      append_locked(entry);
    }
    if (events_) {
      events_->publish("log." + std::string(to_string(level)),
                       {{"timestamp", entry.timestamp},
                        {"level", std::string(to_string(level))},
                        {"source", entry.source},
                        {"message", entry.message}});
    }
  } catch (...) {
  }
}

void Logger::append_locked(LogEntry entry) {
  if (file_) {
    const std::string line = format_log_line(entry) + '\n';
    if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0) {
      std::fclose(file_);
      file_ = nullptr;
      ring_.push_back(LogEntry{entry.timestamp, LogLevel::warning, "kernel",
                               "log file write failed; logging to memory only"});
    }
  }
  ring_.push_back(std::move(entry));
  while (ring_.size() > kCapacity) ring_.pop_front();
}

std::vector<LogEntry> Logger::entries() const {
  std::lock_guard lock(mutex_);
  return {ring_.begin(), ring_.end()};
}

std::size_t Logger::size() const {
  std::lock_guard lock(mutex_);
  return ring_.size();
}

bool Logger::file_enabled() const {
  std::lock_guard lock(mutex_);
  return file_ != nullptr;
}

}  // namespace labkit
