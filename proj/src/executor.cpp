#include "labkit/executor.hpp"

#include "labkit/error.hpp"

namespace labkit {

void FifoMutex::lock() {
  std::unique_lock lock(mutex_);
  if (owner_ == std::this_thread::get_id())
    fail(ErrorKind::Internal, "re-entrant call into a module that is already executing");
  const std::uint64_t ticket = next_ticket_++;
  cv_.wait(lock, [&] { return serving_ == ticket; });
  owner_ = std::this_thread::get_id();
}

void FifoMutex::unlock() {
  {
    std::lock_guard lock(mutex_);
    owner_ = std::thread::id{};
    ++serving_;
  }
  cv_.notify_all();
}

SerialExecutor::SerialExecutor(std::string name) : name_(std::move(name)) {
  thread_ = std::thread([this] { loop(); });
  std::lock_guard lock(mutex_);
  thread_id_ = thread_.get_id();
}

SerialExecutor::~SerialExecutor() {
  if (thread_.joinable() && !on_loop_thread()) stop();
  if (thread_.joinable()) thread_.detach();
}

void SerialExecutor::post(std::function<void()> run, std::function<void()> cancel) {
  {
    std::lock_guard lock(mutex_);
    if (!stopping_) {
      jobs_.push_back(Job{std::move(run), std::move(cancel)});
      cv_.notify_one();
      return;
    }
  }
  if (cancel) cancel();
}

void SerialExecutor::stop() {
  if (on_loop_thread()) fail(ErrorKind::Internal, "executor '" + name_ + "' cannot stop itself");
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (thread_.joinable()) thread_.join();
  std::deque<Job> leftover;
  {
    std::lock_guard lock(mutex_);
    leftover.swap(jobs_);
  }
  for (auto& job : leftover)
    if (job.cancel) job.cancel();
}

bool SerialExecutor::on_loop_thread() const { return std::this_thread::get_id() == thread_id_; }

void SerialExecutor::loop() {
  for (;;) {
    Job job;
    {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [&] { return stopping_ || !jobs_.empty(); });
      if (stopping_) return;
      job = std::move(jobs_.front());
      jobs_.pop_front();
    }
    try {
      job.run();
    } catch (...) {
      // Jobs report their own failures; nothing may escape the loop.
    }
  }
}

}  // namespace labkit
