#pragma once

#include <chrono>
#include <condition_variable>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "labkit/clock.hpp"
#include "labkit/config.hpp"
#include "labkit/events.hpp"
#include "labkit/executor.hpp"
#include "labkit/log.hpp"
#include "labkit/module.hpp"

namespace labkit {

class Recorder;

// Roots plus all transitive connector targets, every module after its
// targets; ties broken by ascending name. Throws UnknownModule for an
// undeclared root and Precondition if the reachable graph has a cycle.
std::vector<std::string> resolve_activation_order(const Configuration& cfg,
                                                  const std::set<std::string>& roots);

struct KernelOptions {
  ModuleRegistry registry = builtin_registry();
  Clock clock = system_clock();
  bool log_to_file = true;
};

struct ModuleInfo {
  std::string name;
  Layer layer = Layer::logic;
  std::string kind;
  LifecycleState state = LifecycleState::unloaded;
  std::optional<std::string> remote_address;
};

class Kernel {
 public:
  using Completion = std::function<void(Json result, std::exception_ptr error)>;

  // Refuses (Schema error) a configuration that fails validate().
  explicit Kernel(Configuration cfg, KernelOptions options = {});
  ~Kernel();
  Kernel(const Kernel&) = delete;
  Kernel& operator=(const Kernel&) = delete;

  const Configuration& config() const { return cfg_; }
  Logger& logger() { return *logger_; }
  EventBus& events() { return events_; }
  Recorder& recorder() { return *recorder_; }
  const Clock& clock() const { return clock_; }

  // Instantiates every declared module (unloaded -> loaded).
  void load_all();
  // Activates dependencies first; ActivationFailed names the failing module.
  LifecycleState activate(const std::string& name);
  // Deactivates `name` and its active dependents, dependents first.
  LifecycleState deactivate(const std::string& name, bool force = false);
  // error -> loaded.
  LifecycleState reset(const std::string& name);
  // Activates every startup entry in order.
  void start();
  // Forced deactivation of everything, reverse activation order.
  void shutdown();

  LifecycleState state(const std::string& name) const;
  std::vector<ModuleInfo> modules() const;
  std::vector<std::string> operations(const std::string& name) const;

  // Runs `op` on `target` and returns its result. With a caller, the
  // caller->target layer pair must be legal (Forbidden otherwise). Errors
  // raised by the operation keep their kind and gain a "target: " prefix.
  Json dispatch(const std::string& target, const std::string& op, const Json& params = Json::object(),
                const std::optional<std::string>& caller = std::nullopt);

  // As dispatch, but logic-module operations complete on the module's loop
  // instead of blocking. `done` is called exactly once; never throws.
  void dispatch_async(const std::string& target, const std::string& op, Json params,
                      Completion done, const std::optional<std::string>& caller = std::nullopt);

  // Blocks until `name` is not active_busy (or `abandon_if_inactive` is no
  // longer active). Returns false on timeout.
  bool wait_idle(const std::string& name,
                 std::chrono::milliseconds timeout = std::chrono::hours(24),
                 const std::optional<std::string>& abandon_if_inactive = std::nullopt);

  // Module instance if active, else NotActive.
  Module& instance(const std::string& name);

  template <typename I>
  I& interface(const std::string& name) {
    auto* iface = dynamic_cast<I*>(&instance(name));
    if (!iface) fail(ErrorKind::Precondition, "module '" + name + "' does not implement " + I::kName);
    return *iface;
  }

  // Lock guarding exclusive access to a local hardware module, else null.
  FifoMutex* exclusive_for(const std::string& name);

  std::shared_ptr<void> shared_resource(const std::string& key,
                                        const std::function<std::shared_ptr<void>()>& make);

  void log(LogLevel level, std::string_view source, std::string_view message) {
    logger_->log(level, source, message);
  }

 private:
  friend class ModuleContext;

  struct Handle {
    ModuleSpec spec;
    LifecycleState state = LifecycleState::unloaded;
    std::unique_ptr<ModuleContext> ctx;
    std::unique_ptr<Module> instance;
    std::unique_ptr<SerialExecutor> loop;
    FifoMutex exclusive;
  };

  Handle& handle(const std::string& name);
  const Handle& handle(const std::string& name) const;
  void set_state(Handle& h, LifecycleState s);
  void instantiate(Handle& h);
  void activate_one(Handle& h);
  void deactivate_one(Handle& h);
  bool uses_loop(const Handle& h) const;
  void check_caller(const Handle& target, const std::optional<std::string>& caller) const;
  Json invoke_guarded(Handle& h, const std::string& op, const Json& params);
  void set_busy(const std::string& name, bool busy);
  void post_from_module(const std::string& name, std::function<void()> job);

  Configuration cfg_;
  ModuleRegistry registry_;
  Clock clock_;
  EventBus events_;
  std::unique_ptr<Logger> logger_;
  std::unique_ptr<Recorder> recorder_;

  std::map<std::string, std::unique_ptr<Handle>, std::less<>> handles_;
  mutable std::mutex mutex_;  // guards Handle::state and instance pointers
  std::condition_variable state_cv_;
  std::recursive_mutex lifecycle_;  // serialises activate/deactivate/reset

  std::mutex shared_mutex_;
  std::map<std::string, std::shared_ptr<void>> shared_;
};

}  // namespace labkit
