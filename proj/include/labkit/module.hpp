#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "labkit/config.hpp"
#include "labkit/error.hpp"
#include "labkit/interfaces.hpp"
#include "labkit/log.hpp"

namespace labkit {

class Kernel;
class ModuleContext;
class Recorder;

enum class LifecycleState { unloaded, loaded, active_idle, active_busy, error };

std::string_view to_string(LifecycleState state);
inline bool is_active(LifecycleState s) {
  return s == LifecycleState::active_idle || s == LifecycleState::active_busy;
}

using OpHandler = std::function<Json(const Json& params)>;

// Base class of every module. Operations are named handlers taking and
// returning JSON; hardware and interfuse modules additionally derive from one
// of the interface classes.
class Module {
 public:
  explicit Module(ModuleContext& ctx) : ctx_(ctx) {}
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  virtual void on_activate() {}
  virtual void on_deactivate() {}

  // Throws UnknownOperation for names that were never exposed.
  virtual Json invoke(const std::string& op, const Json& params);
  std::vector<std::string> operations() const;
  bool has_operation(std::string_view op) const;

 protected:
  void expose(std::string op, OpHandler handler);
  ModuleContext& ctx() { return ctx_; }

 private:
  ModuleContext& ctx_;
  std::map<std::string, OpHandler, std::less<>> ops_;

  friend void expose_interface(Module&, ConfocalScannerInterface&);
  friend void expose_interface(Module&, MicrowaveInterface&);
  friend void expose_interface(Module&, SpectrometerInterface&);
};

// Wire each interface method as a JSON operation of the same name.
void expose_interface(Module& module, ConfocalScannerInterface& iface);
void expose_interface(Module& module, MicrowaveInterface& iface);
void expose_interface(Module& module, SpectrometerInterface& iface);

// Adapter that forwards interface calls to module `target` through the
// kernel: the target must be active, and hardware targets are entered under
// their exclusive FIFO lock. Specialised for the three interfaces.
template <typename I>
std::shared_ptr<I> guard_interface(Kernel& kernel, const std::string& target);

template <>
std::shared_ptr<ConfocalScannerInterface> guard_interface(Kernel&, const std::string&);
template <>
std::shared_ptr<MicrowaveInterface> guard_interface(Kernel&, const std::string&);
template <>
std::shared_ptr<SpectrometerInterface> guard_interface(Kernel&, const std::string&);

// What a module sees of the kernel.
class ModuleContext {
 public:
  ModuleContext(Kernel& kernel, const ModuleSpec& spec) : kernel_(kernel), spec_(spec) {}

  const ModuleSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.name; }
  const Configuration& config() const;
  std::uint64_t seed() const;
  Kernel& kernel() { return kernel_; }
  Recorder& recorder();

  template <typename T>
  T option(const std::string& key, T fallback) const {
    const auto it = spec_.options.find(key);
    if (it == spec_.options.end()) return fallback;
    try {
      return it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::Schema, "module '" + spec_.name + "': option '" + key + "' has the wrong type");
    }
  }

  // Target module name bound to a connector slot; Schema error if unbound.
  const std::string& target_of(const std::string& slot) const;

  template <typename I>
  I& connector(const std::string& slot) {
    auto it = bindings_.find(slot);
    if (it == bindings_.end()) {
      std::shared_ptr<I> guard = guard_interface<I>(kernel_, target_of(slot));
      it = bindings_.emplace(slot, std::static_pointer_cast<void>(guard)).first;
    }
    return *static_cast<I*>(it->second.get());
  }

  // Calls another module as this module (layer rules apply).
  Json dispatch(const std::string& target, const std::string& op, const Json& params = Json::object());
  // Blocks until `target` leaves active_busy, or this module stops being active.
  void wait_idle(const std::string& target);

  void publish(const std::string& topic, const Json& payload);
  void log(LogLevel level, std::string_view message);

  void set_busy(bool busy);
  bool busy() const;
  // True while the module is active; long-running steps stop when this drops.
  bool active() const;

  // Appends a job to this module's loop (logic modules only). Jobs that come
  // up after the module was deactivated are skipped.
  void post(std::function<void()> job);

  template <typename T>
  std::shared_ptr<T> shared(const std::string& key, const std::function<std::shared_ptr<T>()>& make);

 private:
  std::shared_ptr<void> shared_any(const std::string& key,
                                   const std::function<std::shared_ptr<void>()>& make);

  Kernel& kernel_;
  const ModuleSpec& spec_;
  std::map<std::string, std::shared_ptr<void>> bindings_;
};

template <typename T>
std::shared_ptr<T> ModuleContext::shared(const std::string& key,
                                         const std::function<std::shared_ptr<T>()>& make) {
  return std::static_pointer_cast<T>(
      shared_any(key, [&]() -> std::shared_ptr<void> { return make(); }));
}

using ModuleFactory = std::function<std::unique_ptr<Module>(ModuleContext&)>;

class ModuleRegistry {
 public:
  void add(std::string kind, ModuleFactory factory);
  bool has(std::string_view kind) const;
  // Remote specs (remote_address set) go to the remote factory regardless of kind.
  void set_remote_factory(ModuleFactory factory);
  std::unique_ptr<Module> create(const ModuleSpec& spec, ModuleContext& ctx) const;
  std::vector<std::string> kinds() const;

 private:
  std::map<std::string, ModuleFactory, std::less<>> factories_;
  ModuleFactory remote_;
};

// Every module kind shipped with the library, plus remote proxies.
ModuleRegistry builtin_registry();

}  // namespace labkit
