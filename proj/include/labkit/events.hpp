#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace labkit {

struct Event {
  std::string topic;
  std::uint64_t seq = 0;
  nlohmann::json payload;
};

// Shell-style topic match ("odmr.*", "log.error", "*").
bool topic_matches(std::string_view pattern, std::string_view topic);

// A bounded, ordered event stream for one consumer. Sequence numbers are
// assigned per topic at enqueue time, so an overflow (drop-oldest) shows up as
// a gap in seq.
class Subscription {
 public:
  static constexpr std::size_t kDefaultCapacity = 10'000;

  explicit Subscription(std::vector<std::string> patterns = {},
                        std::size_t capacity = kDefaultCapacity);

  void add_patterns(const std::vector<std::string>& patterns);
  void clear_patterns();
  bool matches(std::string_view topic) const;

  void push(const std::string& topic, const nlohmann::json& payload);
  std::optional<Event> next(std::chrono::milliseconds timeout);
  std::vector<Event> drain();
  void close();
  bool closed() const;
  std::uint64_t dropped() const;

 private:
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::vector<std::string> patterns_;
  std::size_t capacity_;
  std::deque<Event> queue_;
  std::map<std::string, std::uint64_t, std::less<>> seq_;
  std::uint64_t dropped_ = 0;
  bool closed_ = false;
};

class EventBus {
 public:
  std::shared_ptr<Subscription> subscribe(std::vector<std::string> patterns,
                                          std::size_t capacity = Subscription::kDefaultCapacity);
  void unsubscribe(const std::shared_ptr<Subscription>& sub);
  void publish(const std::string& topic, const nlohmann::json& payload);

 private:
  std::mutex mutex_;
  std::vector<std::weak_ptr<Subscription>> subscribers_;
};

}  // namespace labkit
