#include "labkit/module.hpp"

#include "labkit/kernel.hpp"

namespace labkit {

std::string_view to_string(LifecycleState state) {
  switch (state) {
    case LifecycleState::unloaded: return "unloaded";
    case LifecycleState::loaded: return "loaded";
    case LifecycleState::active_idle: return "active_idle";
    case LifecycleState::active_busy: return "active_busy";
    case LifecycleState::error: return "error";
  }
  return "error";
}

Json Module::invoke(const std::string& op, const Json& params) {
  const auto it = ops_.find(op);
  if (it == ops_.end()) fail(ErrorKind::UnknownOperation, "unknown operation '" + op + "'");
  try {
    return it->second(params.is_null() ? Json::object() : params);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Precondition, "bad parameters for '" + op + "': " + e.what());
  }
}

std::vector<std::string> Module::operations() const {
  std::vector<std::string> out;
  for (const auto& [name, handler] : ops_) out.push_back(name);
  return out;
}

bool Module::has_operation(std::string_view op) const { return ops_.find(op) != ops_.end(); }

void Module::expose(std::string op, OpHandler handler) { ops_[std::move(op)] = std::move(handler); }

namespace {

Position3 position_param(const Json& params) {
  return params.contains("position") ? params.at("position").get<Position3>() : params.get<Position3>();
}

}  // namespace

void expose_interface(Module& m, ConfocalScannerInterface& iface) {
  m.expose("get_volume", [&iface](const Json&) { return Json(iface.get_volume()); });
  m.expose("get_position", [&iface](const Json&) { return Json(iface.get_position()); });
  m.expose("set_position", [&iface](const Json& p) {
    iface.set_position(position_param(p));
    return Json();
  });
  m.expose("scan_line", [&iface](const Json& p) {
    return vector_to_json(iface.scan_line(p.at("start").get<Position3>(), p.at("end").get<Position3>(),
                                          p.at("pixels").get<int>(), p.at("dwell_s").get<double>()));
  });
}

void expose_interface(Module& m, MicrowaveInterface& iface) {
  m.expose("set_cw", [&iface](const Json& p) {
    iface.set_cw(p.at("frequency").get<double>(), p.at("power").get<double>());
    return Json();
  });
  m.expose("set_output", [&iface](const Json& p) {
    iface.set_output(p.at("on").get<bool>());
    return Json();
  });
  m.expose("get_state", [&iface](const Json&) { return Json(iface.get_state()); });
}

void expose_interface(Module& m, SpectrometerInterface& iface) {
  m.expose("acquire_spectrum", [&iface](const Json& p) {
    return Json(iface.acquire_spectrum(p.at("exposure_s").get<double>()));
  });
}

void ModuleRegistry::add(std::string kind, ModuleFactory factory) {
  factories_[std::move(kind)] = std::move(factory);
}

bool ModuleRegistry::has(std::string_view kind) const { return factories_.find(kind) != factories_.end(); }

void ModuleRegistry::set_remote_factory(ModuleFactory factory) { remote_ = std::move(factory); }

std::unique_ptr<Module> ModuleRegistry::create(const ModuleSpec& spec, ModuleContext& ctx) const {
  if (spec.remote_address) {
    if (!remote_) fail(ErrorKind::Precondition, "no remote module support registered");
    return remote_(ctx);
  }
  const auto it = factories_.find(spec.kind);
  if (it == factories_.end()) fail(ErrorKind::Schema, "unknown module kind '" + spec.kind + "'");
  return it->second(ctx);
}

std::vector<std::string> ModuleRegistry::kinds() const {
  std::vector<std::string> out;
  for (const auto& [kind, f] : factories_) out.push_back(kind);
  return out;
}

const Configuration& ModuleContext::config() const { return kernel_.config(); }
std::uint64_t ModuleContext::seed() const { return kernel_.config().seed; }
Recorder& ModuleContext::recorder() { return kernel_.recorder(); }

const std::string& ModuleContext::target_of(const std::string& slot) const {
  const auto it = spec_.connectors.find(slot);
  if (it == spec_.connectors.end())
    fail(ErrorKind::Schema, "module '" + spec_.name + "': connector '" + slot + "' is not bound");
  return it->second;
}

Json ModuleContext::dispatch(const std::string& target, const std::string& op, const Json& params) {
  return kernel_.dispatch(target, op, params, spec_.name);
}

void ModuleContext::wait_idle(const std::string& target) {
  kernel_.wait_idle(target, std::chrono::hours(24), spec_.name);
}

void ModuleContext::publish(const std::string& topic, const Json& payload) {
  kernel_.events().publish(topic, payload);
}

void ModuleContext::log(LogLevel level, std::string_view message) {
  kernel_.log(level, spec_.name, message);
}

void ModuleContext::set_busy(bool busy) { kernel_.set_busy(spec_.name, busy); }

bool ModuleContext::busy() const { return kernel_.state(spec_.name) == LifecycleState::active_busy; }

bool ModuleContext::active() const { return is_active(kernel_.state(spec_.name)); }

void ModuleContext::post(std::function<void()> job) { kernel_.post_from_module(spec_.name, std::move(job)); }

std::shared_ptr<void> ModuleContext::shared_any(const std::string& key,
                                                const std::function<std::shared_ptr<void>()>& make) {
  return kernel_.shared_resource(key, make);
}

}  // namespace labkit
