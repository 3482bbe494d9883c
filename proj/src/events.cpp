#include "labkit/events.hpp"

#include <algorithm>

#include <fnmatch.h>

namespace labkit {

bool topic_matches(std::string_view pattern, std::string_view topic) {
  const std::string p(pattern), t(topic);
  return fnmatch(p.c_str(), t.c_str(), 0) == 0;
}

Subscription::Subscription(std::vector<std::string> patterns, std::size_t capacity)
    : patterns_(std::move(patterns)), capacity_(std::max<std::size_t>(capacity, 1)) {}

void Subscription::add_patterns(const std::vector<std::string>& patterns) {
  std::lock_guard lock(mutex_);
  for (const auto& p : patterns)
    if (std::find(patterns_.begin(), patterns_.end(), p) == patterns_.end()) patterns_.push_back(p);
}

void Subscription::clear_patterns() {
  std::lock_guard lock(mutex_);
  patterns_.clear();
}

bool Subscription::matches(std::string_view topic) const {
  std::lock_guard lock(mutex_);
  return std::any_of(patterns_.begin(), patterns_.end(),
                     [&](const std::string& p) { return topic_matches(p, topic); });
}

void Subscription::push(const std::string& topic, const nlohmann::json& payload) {
  {
    std::lock_guard lock(mutex_);
    if (closed_) return;
    const bool wanted = std::any_of(patterns_.begin(), patterns_.end(),
                                    [&](const std::string& p) { return topic_matches(p, topic); });
    if (!wanted) return;
    const std::uint64_t seq = ++seq_[topic];
    if (queue_.size() >= capacity_) {
      queue_.pop_front();
      ++dropped_;
    }
    queue_.push_back(Event{topic, seq, payload});
  }
  cv_.notify_one();
}

std::optional<Event> Subscription::next(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mutex_);
  cv_.wait_for(lock, timeout, [&] { return !queue_.empty() || closed_; });
  if (queue_.empty()) return std::nullopt;
  Event e = std::move(queue_.front());
  queue_.pop_front();
  return e;
}

std::vector<Event> Subscription::drain() {
  std::lock_guard lock(mutex_);
  std::vector<Event> out(std::make_move_iterator(queue_.begin()),
                         std::make_move_iterator(queue_.end()));
  queue_.clear();
  return out;
}

void Subscription::close() {
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
  }
  cv_.notify_all();
}

bool Subscription::closed() const {
  std::lock_guard lock(mutex_);
  return closed_;
}

std::uint64_t Subscription::dropped() const {
  std::lock_guard lock(mutex_);
  return dropped_;
}

std::shared_ptr<Subscription> EventBus::subscribe(std::vector<std::string> patterns,
                                                  std::size_t capacity) {
  auto sub = std::make_shared<Subscription>(std::move(patterns), capacity);
  std::lock_guard lock(mutex_);
  subscribers_.push_back(sub);
  return sub;
}

void EventBus::unsubscribe(const std::shared_ptr<Subscription>& sub) {
  std::lock_guard lock(mutex_);
  std::erase_if(subscribers_, [&](const std::weak_ptr<Subscription>& w) {
    auto s = w.lock();
    return !s || s == sub;
  });
}

void EventBus::publish(const std::string& topic, const nlohmann::json& payload) {
  // Held across delivery so every subscriber sees one global order.
  std::lock_guard lock(mutex_);
  bool expired = false;
  for (const auto& weak : subscribers_) {
    if (auto sub = weak.lock())
      sub->push(topic, payload);
    else
      expired = true;
  }
  if (expired)
    std::erase_if(subscribers_, [](const std::weak_ptr<Subscription>& w) { return w.expired(); });
}

}  // namespace labkit
