#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <string>
#include <thread>

namespace labkit {

// Ticket lock: waiters acquire in arrival order. Locking twice from the owning
// thread raises Internal instead of deadlocking.
class FifoMutex {
 public:
  void lock();
  void unlock();

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  std::uint64_t next_ticket_ = 0;
  std::uint64_t serving_ = 0;
  std::thread::id owner_{};
};

// One thread draining a FIFO of jobs. Jobs still queued at stop() get their
// cancel callback instead of running.
class SerialExecutor {
 public:
  explicit SerialExecutor(std::string name);
  ~SerialExecutor();
  SerialExecutor(const SerialExecutor&) = delete;
  SerialExecutor& operator=(const SerialExecutor&) = delete;

  void post(std::function<void()> run, std::function<void()> cancel = {});
  void stop();
  bool on_loop_thread() const;
  const std::string& name() const { return name_; }

 private:
  struct Job {
    std::function<void()> run;
    std::function<void()> cancel;
  };

  void loop();

  std::string name_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<Job> jobs_;
  bool stopping_ = false;
  std::thread thread_;
  std::thread::id thread_id_;
};

}  // namespace labkit
