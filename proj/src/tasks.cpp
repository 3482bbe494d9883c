#include "labkit/tasks.hpp"

namespace labkit {

nlohmann::json to_json(const SpotOutcome& s) {
  Json j{{"spot_index", s.spot_index},
         {"spot", s.spot},
         {"optimizer", s.optimizer},
         {"accepted", s.optimizer.is_object() && s.optimizer.value("accepted", false)},
         {"fit", s.fit},
         {"data_path", s.data_path.empty() ? Json() : Json(s.data_path)},
         {"svg_path", s.svg_path.empty() ? Json() : Json(s.svg_path)}};
  if (!s.error.empty()) j["error"] = s.error;
  return j;
}

MultispotTask::MultispotTask(ModuleContext& ctx) : Module(ctx) {
  expose("run_multispot", [this](const Json& p) {
    std::vector<Position3> spots;
    for (const auto& s : p.value("spots", Json::array())) spots.push_back(s.get<Position3>());
    const SweepSettings sweep = p.value("sweep", Json::object()).get<SweepSettings>();
    Json out = Json::array();
    for (const auto& r : run(spots, sweep, p.value("tag", std::string("multispot")))) out.push_back(to_json(r));
    return out;
  });
}

Json MultispotTask::call(const std::string& slot, const std::string& op, const Json& params) {
  return ctx().dispatch(ctx().target_of(slot), op, params);
}

void MultispotTask::progress(int index, const char* phase) {
  ctx().publish("task.progress", {{"spot_index", index}, {"phase", phase}});
}

std::vector<SpotOutcome> MultispotTask::run(const std::vector<Position3>& spots, const SweepSettings& sweep,
                                            const std::string& tag) {
  sweep.validate();
  require(!sweep.continuous(), "multispot needs a finite number of sweeps");
  if (call("confocal", "get_status").value("busy", false)) fail(ErrorKind::Busy, "confocal logic is busy");
  if (call("odmr", "get_status").value("busy", false)) fail(ErrorKind::Busy, "odmr logic is busy");

  ctx().set_busy(true);
  struct Idle {
    ModuleContext& c;
    ~Idle() { c.set_busy(false); }
  } idle{ctx()};

  std::vector<SpotOutcome> out;
  for (std::size_t i = 0; i < spots.size(); ++i) {
    const int index = static_cast<int>(i);
    SpotOutcome& o = out.emplace_back();
    o.spot_index = index;
    o.spot = spots[i];
    try {
      progress(index, "cursor");
      call("confocal", "set_cursor", {{"position", spots[i]}});
      progress(index, "optimize");
      o.optimizer = call("confocal", "optimize_at", {{"position", spots[i]}});
      if (!o.optimizer.value("accepted", false)) {
        progress(index, "skipped");
        continue;
      }
      progress(index, "sweep");
      call("odmr", "start_sweep", sweep);
      ctx().wait_idle(ctx().target_of("odmr"));
      if (!ctx().active()) fail(ErrorKind::NotActive, "task deactivated");
      const Json status = call("odmr", "get_status");
      if (const Json& err = status.at("last_error"); !err.is_null()) {
        const std::string msg = err.value("message", std::string());
        if (err.value("kind", std::string()) == to_string(ErrorKind::DeviceFault))
          fail(ErrorKind::DeviceFault, msg);
        fail(ErrorKind::Internal, "sweep failed: " + msg);
      }
      progress(index, "fit");
      o.fit = call("odmr", "fit_resonance");
      progress(index, "save");
      const Json saved = call("odmr", "save", {{"tag", tag + "_" + std::to_string(index)}});
      o.data_path = saved.at("data").get<std::string>();
      o.svg_path = saved.at("svg").get<std::string>();
      progress(index, "done");
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::DeviceFault || e.kind() == ErrorKind::NotActive) {
        try {
          call("odmr", "stop_sweep");
        } catch (const std::exception&) {
        }
        progress(index, "aborted");
        throw;
      }
      o.error = e.what();
      ctx().log(LogLevel::warning, "spot " + std::to_string(index) + ": " + e.what());
      progress(index, "failed");
    }
  }
  return out;
}

WebPanel::WebPanel(ModuleContext& ctx) : Module(ctx) {
  expose("describe", [this](const Json&) {
    Json slots = Json::object();
    for (const auto& [slot, target] : this->ctx().spec().connectors) slots[slot] = target;
    return Json{{"name", this->ctx().name()}, {"connectors", slots}};
  });
  expose("forward", [this](const Json& p) {
    return this->ctx().dispatch(this->ctx().target_of(p.at("slot").get<std::string>()),
                                p.at("op").get<std::string>(), p.value("params", Json::object()));
  });
}

void register_tasks(ModuleRegistry& registry) {
  registry.add("multispot_task", [](ModuleContext& ctx) { return std::make_unique<MultispotTask>(ctx); });
  registry.add("web_panel", [](ModuleContext& ctx) { return std::make_unique<WebPanel>(ctx); });
}

}  // namespace labkit
