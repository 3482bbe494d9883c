#include "labkit/kernel.hpp"

#include <algorithm>
#include <future>
#include <queue>
#include <sstream>

#include "labkit/recorder.hpp"

namespace labkit {

std::vector<std::string> resolve_activation_order(const Configuration& cfg,
                                                  const std::set<std::string>& roots) {
  std::set<std::string> closure;
  std::vector<std::string> stack;
  for (const auto& r : roots) {
    if (!cfg.find(r)) fail(ErrorKind::UnknownModule, "unknown module '" + r + "'");
    stack.push_back(r);
  }
  while (!stack.empty()) {
    const std::string name = stack.back();
    stack.pop_back();
    if (!closure.insert(name).second) continue;
    const ModuleSpec* spec = cfg.find(name);
    if (!spec) fail(ErrorKind::UnknownModule, "unknown module '" + name + "'");
    for (const auto& [slot, target] : spec->connectors) stack.push_back(target);
  }

  std::map<std::string, std::set<std::string>> pending;     // module -> unresolved targets
  std::map<std::string, std::vector<std::string>> users;    // target -> modules using it
  for (const auto& name : closure) {
    auto& p = pending[name];
    for (const auto& [slot, target] : cfg.find(name)->connectors) p.insert(target);
    for (const auto& t : p) users[t].push_back(name);
  }

  std::priority_queue<std::string, std::vector<std::string>, std::greater<>> ready;
  for (const auto& [name, targets] : pending)
    if (targets.empty()) ready.push(name);

  std::vector<std::string> order;
  while (!ready.empty()) {
    std::string next = ready.top();
    ready.pop();
    for (const auto& u : users[next]) {
      auto& p = pending[u];
      p.erase(next);
      if (p.empty()) ready.push(u);
    }
    order.push_back(std::move(next));
  }
  if (order.size() != closure.size())
    fail(ErrorKind::Precondition, "connector graph has a cycle; no activation order exists");
  return order;
}

namespace {

[[noreturn]] void rethrow_prefixed(const std::string& target) {
  try {
    throw;
  } catch (const ActivationFailed&) {
    throw;
  } catch (const Error& e) {
    throw Error(e.kind(), target + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Internal, target + ": " + e.what());
  }
}

std::string describe(const std::vector<Violation>& violations) {
  std::ostringstream out;
  out << "invalid configuration:";
  for (const auto& v : violations) out << ' ' << v.rule << " (" << v.module << "): " << v.message << ';';
  return out.str();
}

}  // namespace

Kernel::Kernel(Configuration cfg, KernelOptions options)
    : cfg_(std::move(cfg)), registry_(std::move(options.registry)), clock_(std::move(options.clock)) {
  const auto violations = validate(cfg_);
  if (!violations.empty()) fail(ErrorKind::Schema, describe(violations));
  logger_ = std::make_unique<Logger>(
      options.log_to_file ? std::optional<std::filesystem::path>(cfg_.log_path) : std::nullopt, clock_,
      &events_);
  recorder_ = std::make_unique<Recorder>(cfg_.data_dir, clock_, cfg_.seed, &events_);
  for (const auto& spec : cfg_.modules) {
    auto h = std::make_unique<Handle>();
    h->spec = spec;
    h->ctx = std::make_unique<ModuleContext>(*this, h->spec);
    handles_.emplace(spec.name, std::move(h));
  }
  log(LogLevel::info, "kernel", "started");
}

Kernel::~Kernel() {
  shutdown();
  log(LogLevel::info, "kernel", "stopped");
}

Kernel::Handle& Kernel::handle(const std::string& name) {
  const auto it = handles_.find(name);
  if (it == handles_.end()) fail(ErrorKind::UnknownModule, "unknown module '" + name + "'");
  return *it->second;
}

const Kernel::Handle& Kernel::handle(const std::string& name) const {
  const auto it = handles_.find(name);
  if (it == handles_.end()) fail(ErrorKind::UnknownModule, "unknown module '" + name + "'");
  return *it->second;
}

bool Kernel::uses_loop(const Handle& h) const {
  return h.spec.layer != Layer::hardware && !h.spec.remote_address;
}

void Kernel::set_state(Handle& h, LifecycleState s) {
  {
    std::lock_guard lock(mutex_);
    if (h.state == s) return;
    h.state = s;
  }
  state_cv_.notify_all();
  events_.publish("module.state", {{"module", h.spec.name}, {"state", std::string(to_string(s))}});
}

void Kernel::instantiate(Handle& h) {
  auto instance = registry_.create(h.spec, *h.ctx);
  {
    std::lock_guard lock(mutex_);
    h.instance = std::move(instance);
  }
  set_state(h, LifecycleState::loaded);
}

void Kernel::load_all() {
  std::lock_guard life(lifecycle_);
  for (const auto& spec : cfg_.modules) {
    Handle& h = handle(spec.name);
    if (h.state != LifecycleState::unloaded) continue;
    try {
      instantiate(h);
    } catch (const std::exception& e) {
      set_state(h, LifecycleState::error);
      log(LogLevel::error, "kernel", "loading " + spec.name + " failed: " + e.what());
      throw;
    }
  }
}

void Kernel::activate_one(Handle& h) {
  const std::string& name = h.spec.name;
  if (is_active(h.state)) return;
  if (h.state == LifecycleState::error)
    throw ActivationFailed(name, ErrorKind::Precondition, "module is in the error state; reset it first");
  try {
    if (h.state == LifecycleState::unloaded) instantiate(h);
    if (uses_loop(h)) {
      auto loop = std::make_unique<SerialExecutor>(name);
      std::promise<void> done;
      loop->post(
          [&] {
            try {
              h.instance->on_activate();
              done.set_value();
            } catch (...) {
              done.set_exception(std::current_exception());
            }
          },
          [&] { done.set_exception(std::make_exception_ptr(Error(ErrorKind::Internal, "loop stopped"))); });
      try {
        done.get_future().get();
      } catch (...) {
        loop->stop();
        throw;
      }
      std::lock_guard lock(mutex_);
      h.loop = std::move(loop);
    } else if (FifoMutex* m = exclusive_for(name)) {
      std::lock_guard guard(*m);
      h.instance->on_activate();
    } else {
      h.instance->on_activate();
    }
  } catch (const Error& e) {
    set_state(h, LifecycleState::error);
    log(LogLevel::error, "kernel", "activation of " + name + " failed: " + e.what());
    throw ActivationFailed(name, e.kind(), e.what());
  } catch (const std::exception& e) {
    set_state(h, LifecycleState::error);
    log(LogLevel::error, "kernel", "activation of " + name + " failed: " + e.what());
    throw ActivationFailed(name, ErrorKind::Internal, e.what());
  }
  set_state(h, LifecycleState::active_idle);
  log(LogLevel::info, "kernel", "activated " + name);
}

LifecycleState Kernel::activate(const std::string& name) {
  std::lock_guard life(lifecycle_);
  for (const auto& m : resolve_activation_order(cfg_, {name})) activate_one(handle(m));
  return state(name);
}

void Kernel::start() {
  for (const auto& name : cfg_.startup) activate(name);
}

void Kernel::deactivate_one(Handle& h) {
  const std::string& name = h.spec.name;
  std::unique_ptr<SerialExecutor> loop;
  {
    std::lock_guard lock(mutex_);
    if (!is_active(h.state)) return;
    if (h.loop && h.loop->on_loop_thread())
      fail(ErrorKind::Internal, name + ": a module cannot deactivate itself from its own loop");
    loop = std::move(h.loop);
  }
  set_state(h, LifecycleState::loaded);
  try {
    if (loop) {
      std::promise<void> done;
      loop->post(
          [&] {
            try {
              h.instance->on_deactivate();
              done.set_value();
            } catch (...) {
              done.set_exception(std::current_exception());
            }
          },
          [&] { done.set_value(); });
      done.get_future().get();
    } else if (FifoMutex* m = exclusive_for(name)) {
      std::lock_guard guard(*m);
      h.instance->on_deactivate();
    } else {
      h.instance->on_deactivate();
    }
  } catch (const std::exception& e) {
    log(LogLevel::warning, "kernel", "deactivation hook of " + name + " failed: " + e.what());
  }
  if (loop) loop->stop();
  log(LogLevel::info, "kernel", "deactivated " + name);
}

LifecycleState Kernel::deactivate(const std::string& name, bool force) {
  std::lock_guard life(lifecycle_);
  Handle& h = handle(name);
  if (!is_active(state(name))) return state(name);

  std::map<std::string, std::vector<std::string>> users;
  for (const auto& spec : cfg_.modules)
    for (const auto& [slot, target] : spec.connectors) users[target].push_back(spec.name);
  std::set<std::string> affected{name};
  std::vector<std::string> stack{name};
  while (!stack.empty()) {
    const std::string t = stack.back();
    stack.pop_back();
    for (const auto& u : users[t])
      if (affected.insert(u).second) stack.push_back(u);
  }
  std::erase_if(affected, [&](const std::string& m) { return !is_active(state(m)); });

  if (!force)
    for (const auto& m : affected)
      if (state(m) == LifecycleState::active_busy)
        fail(ErrorKind::Busy, "cannot deactivate '" + name + "': '" + m + "' is busy");

  auto order = resolve_activation_order(cfg_, affected);
  std::erase_if(order, [&](const std::string& m) { return !affected.count(m); });
  std::reverse(order.begin(), order.end());
  for (const auto& m : order) deactivate_one(handle(m));
  return h.state;
}

LifecycleState Kernel::reset(const std::string& name) {
  std::lock_guard life(lifecycle_);
  Handle& h = handle(name);
  if (state(name) != LifecycleState::error) return state(name);
  if (h.instance) {
    set_state(h, LifecycleState::loaded);
  } else {
    instantiate(h);
  }
  log(LogLevel::info, "kernel", "reset " + name);
  return h.state;
}

void Kernel::shutdown() {
  std::lock_guard life(lifecycle_);
  std::set<std::string> all;
  for (const auto& spec : cfg_.modules) all.insert(spec.name);
  auto order = resolve_activation_order(cfg_, all);
  std::reverse(order.begin(), order.end());
  for (const auto& m : order) deactivate_one(handle(m));
}

LifecycleState Kernel::state(const std::string& name) const {
  const Handle& h = handle(name);
  std::lock_guard lock(mutex_);
  return h.state;
}

std::vector<ModuleInfo> Kernel::modules() const {
  std::vector<ModuleInfo> out;
  std::lock_guard lock(mutex_);
  for (const auto& spec : cfg_.modules) {
    const Handle& h = *handles_.find(spec.name)->second;
    out.push_back({spec.name, spec.layer, spec.kind, h.state, spec.remote_address});
  }
  return out;
}

std::vector<std::string> Kernel::operations(const std::string& name) const {
  const Handle& h = handle(name);
  std::lock_guard lock(mutex_);
  if (!h.instance) return {};
  return h.instance->operations();
}

void Kernel::check_caller(const Handle& target, const std::optional<std::string>& caller) const {
  if (!caller) return;
  const Handle& from = handle(*caller);
  if (!layer_edge_allowed(from.spec.layer, target.spec.layer))
    fail(ErrorKind::Forbidden, *caller + " (" + std::string(to_string(from.spec.layer)) + ") may not call " +
                                   target.spec.name + " (" + std::string(to_string(target.spec.layer)) + ")");
}

FifoMutex* Kernel::exclusive_for(const std::string& name) {
  Handle& h = handle(name);
  return h.spec.layer == Layer::hardware && !h.spec.remote_address ? &h.exclusive : nullptr;
}

Module& Kernel::instance(const std::string& name) {
  Handle& h = handle(name);
  std::lock_guard lock(mutex_);
  if (!is_active(h.state))
    fail(ErrorKind::NotActive, name + ": module is not active (" + std::string(to_string(h.state)) + ")");
  return *h.instance;
}

Json Kernel::invoke_guarded(Handle& h, const std::string& op, const Json& params) {
  std::unique_lock<FifoMutex> guard;
  if (FifoMutex* m = exclusive_for(h.spec.name)) guard = std::unique_lock<FifoMutex>(*m);
  return instance(h.spec.name).invoke(op, params);
}

Json Kernel::dispatch(const std::string& target, const std::string& op, const Json& params,
                      const std::optional<std::string>& caller) {
  Handle& h = handle(target);
  check_caller(h, caller);
  try {
    if (!uses_loop(h)) return invoke_guarded(h, op, params);

    auto result = std::make_shared<std::promise<Json>>();
    auto future = result->get_future();
    {
      std::lock_guard lock(mutex_);
      if (!is_active(h.state) || !h.loop)
        fail(ErrorKind::NotActive, "module is not active (" + std::string(to_string(h.state)) + ")");
      if (h.loop->on_loop_thread())
        fail(ErrorKind::Internal, "re-entrant dispatch into a module from its own loop");
      h.loop->post(
          [this, &h, op, params, result] {
            try {
              result->set_value(instance(h.spec.name).invoke(op, params));
            } catch (...) {
              result->set_exception(std::current_exception());
            }
          },
          [result] {
            result->set_exception(
                std::make_exception_ptr(Error(ErrorKind::NotActive, "module was deactivated")));
          });
    }
    return future.get();
  } catch (...) {
    rethrow_prefixed(target);
  }
}

void Kernel::dispatch_async(const std::string& target, const std::string& op, Json params, Completion done,
                            const std::optional<std::string>& caller) {
  auto shared_done = std::make_shared<Completion>(std::move(done));
  auto current_error = [&target] {
    try {
      rethrow_prefixed(target);
    } catch (...) {
      return std::current_exception();
    }
  };
  Json result;
  try {
    Handle& h = handle(target);
    check_caller(h, caller);
    if (uses_loop(h)) {
      std::lock_guard lock(mutex_);
      if (!is_active(h.state) || !h.loop)
        fail(ErrorKind::NotActive, "module is not active (" + std::string(to_string(h.state)) + ")");
      h.loop->post(
          [this, &h, target, op, params = std::move(params), shared_done, current_error] {
            Json out;
            std::exception_ptr error;
            try {
              out = instance(h.spec.name).invoke(op, params);
            } catch (...) {
              error = current_error();
            }
            (*shared_done)(std::move(out), error);
          },
          [target, shared_done] {
            (*shared_done)(Json(), std::make_exception_ptr(
                                       Error(ErrorKind::NotActive, target + ": module was deactivated")));
          });
      return;
    }
    result = invoke_guarded(h, op, params);
  } catch (...) {
    (*shared_done)(Json(), current_error());
    return;
  }
  (*shared_done)(std::move(result), nullptr);
}

bool Kernel::wait_idle(const std::string& name, std::chrono::milliseconds timeout,
                       const std::optional<std::string>& abandon_if_inactive) {
  const Handle& h = handle(name);
  const Handle* other = abandon_if_inactive ? &handle(*abandon_if_inactive) : nullptr;
  std::unique_lock lock(mutex_);
  return state_cv_.wait_for(lock, timeout, [&] {
    return h.state != LifecycleState::active_busy || (other && !is_active(other->state));
  });
}

void Kernel::set_busy(const std::string& name, bool busy) {
  Handle& h = handle(name);
  LifecycleState next;
  {
    std::lock_guard lock(mutex_);
    if (!is_active(h.state)) return;
    next = busy ? LifecycleState::active_busy : LifecycleState::active_idle;
    if (h.state == next) return;
  }
  set_state(h, next);
}

void Kernel::post_from_module(const std::string& name, std::function<void()> job) {
  Handle& h = handle(name);
  std::lock_guard lock(mutex_);
  if (!is_active(h.state) || !h.loop) return;
  h.loop->post([this, &h, job = std::move(job)] {
    if (is_active(state(h.spec.name))) job();
  });
}

std::shared_ptr<void> Kernel::shared_resource(const std::string& key,
                                              const std::function<std::shared_ptr<void>()>& make) {
  std::lock_guard lock(shared_mutex_);
  auto& slot = shared_[key];
  if (!slot) slot = make();
  return slot;
}

namespace {

class GuardBase {
 public:
  GuardBase(Kernel& kernel, std::string target) : kernel_(kernel), target_(std::move(target)) {}

  template <typename I, typename F>
  auto call(F&& f) {
    std::unique_lock<FifoMutex> guard;
    if (FifoMutex* m = kernel_.exclusive_for(target_)) guard = std::unique_lock<FifoMutex>(*m);
    try {
      return f(kernel_.interface<I>(target_));
    } catch (...) {
      rethrow_prefixed(target_);
    }
  }

  Kernel& kernel_;
  std::string target_;
};

class GuardedScanner final : public ConfocalScannerInterface, GuardBase {
 public:
  using GuardBase::GuardBase;
  using I = ConfocalScannerInterface;

  ScanVolume get_volume() override {
    return call<I>([](I& s) { return s.get_volume(); });
  }
  Position3 get_position() override {
    return call<I>([](I& s) { return s.get_position(); });
  }
  void set_position(const Position3& p) override {
    call<I>([&](I& s) { s.set_position(p); });
  }
  Eigen::VectorXd scan_line(const Position3& a, const Position3& b, int pixels, double dwell_s) override {
    return call<I>([&](I& s) { return s.scan_line(a, b, pixels, dwell_s); });
  }
};

class GuardedMicrowave final : public MicrowaveInterface, GuardBase {
 public:
  using GuardBase::GuardBase;
  using I = MicrowaveInterface;

  void set_cw(double f, double p) override {
    call<I>([&](I& m) { m.set_cw(f, p); });
  }
  void set_output(bool on) override {
    call<I>([&](I& m) { m.set_output(on); });
  }
  MicrowaveState get_state() override {
    return call<I>([](I& m) { return m.get_state(); });
  }
};

class GuardedSpectrometer final : public SpectrometerInterface, GuardBase {
 public:
  using GuardBase::GuardBase;
  using I = SpectrometerInterface;

  Spectrum acquire_spectrum(double exposure_s) override {
    return call<I>([&](I& s) { return s.acquire_spectrum(exposure_s); });
  }
};

}  // namespace

template <>
std::shared_ptr<ConfocalScannerInterface> guard_interface(Kernel& kernel, const std::string& target) {
  return std::make_shared<GuardedScanner>(kernel, target);
}

template <>
std::shared_ptr<MicrowaveInterface> guard_interface(Kernel& kernel, const std::string& target) {
  return std::make_shared<GuardedMicrowave>(kernel, target);
}

template <>
std::shared_ptr<SpectrometerInterface> guard_interface(Kernel& kernel, const std::string& target) {
  return std::make_shared<GuardedSpectrometer>(kernel, target);
}

}  // namespace labkit
