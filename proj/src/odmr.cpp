#include "labkit/odmr.hpp"

#include <cmath>

#include "labkit/recorder.hpp"

namespace labkit {

double SweepSettings::frequency(int k) const {
  if (k == n_points - 1) return f_stop;
  return std::lerp(f_start, f_stop, static_cast<double>(k) / (n_points - 1));
}

void SweepSettings::validate() const {
  require(std::isfinite(f_start) && std::isfinite(f_stop) && f_start < f_stop, "sweep needs f_start < f_stop");
  require(n_points >= 2, "sweep needs at least 2 points");
  require(std::isfinite(power), "power must be finite");
  require(std::isfinite(dwell_s) && dwell_s > 0.0, "dwell time must be positive");
  require(n_sweeps >= 0, "n_sweeps must be >= 1 or \"continuous\"");
}

void to_json(nlohmann::json& j, const SweepSettings& s) {
  j = {{"f_start", s.f_start}, {"f_stop", s.f_stop}, {"n_points", s.n_points},
       {"power", s.power},     {"dwell_s", s.dwell_s}};
  j["n_sweeps"] = s.continuous() ? nlohmann::json("continuous") : nlohmann::json(s.n_sweeps);
}

void from_json(const nlohmann::json& j, SweepSettings& s) {
  SweepSettings d;
  s.f_start = j.value("f_start", d.f_start);
  s.f_stop = j.value("f_stop", d.f_stop);
  s.n_points = j.value("n_points", d.n_points);
  s.power = j.value("power", d.power);
  s.dwell_s = j.value("dwell_s", d.dwell_s);
  s.n_sweeps = d.n_sweeps;
  if (const auto it = j.find("n_sweeps"); it != j.end()) {
    if (it->is_string()) {
      require(it->get<std::string>() == "continuous", "n_sweeps must be an integer or \"continuous\"");
      s.n_sweeps = 0;
    } else {
      s.n_sweeps = it->get<int>();
      require(s.n_sweeps >= 1, "n_sweeps must be >= 1 or \"continuous\"");
    }
  }
}

nlohmann::json to_json(const OdmrRecord& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.matrix) rows.push_back(vector_to_json(row));
  return {{"run_id", r.run_id},
          {"settings", r.settings},
          {"frequencies", vector_to_json(r.frequencies)},
          {"matrix", std::move(rows)},
          {"first_row", r.first_row()},
          {"sum", vector_to_json(r.mean)},
          {"sweeps_done", r.sweeps_done},
          {"position", r.position}};
}

OdmrLogic::OdmrLogic(ModuleContext& ctx) : Module(ctx) {
  expose("start_sweep", [this](const Json& p) { return Json{{"run_id", start_sweep(p.get<SweepSettings>())}}; });
  expose("stop_sweep", [this](const Json&) {
    stop_sweep();
    return Json();
  });
  expose("fit_resonance", [this](const Json&) { return fit::to_json(fit_resonance()); });
  expose("get_record", [this](const Json&) { return to_json(record_); });
  expose("get_status", [this](const Json&) {
    return Json{{"busy", this->ctx().busy()},
                {"run_id", record_.run_id},
                {"sweeps_done", record_.sweeps_done},
                {"last_error", last_error_.empty() ? Json()
                                                   : Json{{"kind", to_string(last_error_kind_)},
                                                          {"message", last_error_}}}};
  });
  expose("save", [this](const Json& p) {
    require(record_.sweeps_done >= 1, "nothing to save: no completed sweep");
    const SweepSettings& s = record_.settings;
    Metadata meta{{"kind", "odmr"},           {"f_start", s.f_start},
                  {"f_stop", s.f_stop},       {"n_points", s.n_points},
                  {"power", s.power},         {"dwell_s", s.dwell_s},
                  {"sweeps_done", record_.sweeps_done}, {"run_id", record_.run_id},
                  {"position_x", record_.position.x}, {"position_y", record_.position.y},
                  {"position_z", record_.position.z}, {"frequency_unit", "Hz"},
                  {"value_unit", "counts/s"}};
    Columns cols{{"frequency", record_.frequencies}, {"mean", record_.mean}};
    int index = record_.first_row();
    for (const auto& row : record_.matrix) cols.emplace_back("sweep_" + std::to_string(index++), row);
    const fit::FitResult* fit = last_fit_ ? &*last_fit_ : nullptr;
    if (fit) {
      meta["fit_f0"] = fit->value("f0");
      meta["fit_fwhm"] = fit->value("fwhm");
      meta["fit_contrast"] = fit->value("c");
      meta["fit_offset"] = fit->value("offset");
    }
    auto& rec = this->ctx().recorder();
    const auto data = rec.save_data(p.value("tag", std::string("odmr")), meta, cols);
    const auto svg = rec.save_plot_beside(data, record_.frequencies, record_.mean,
                                          {"ODMR", "frequency (Hz)", "average fluorescence (counts/s)"}, fit);
    return Json{{"data", data.string()}, {"svg", svg.string()}};
  });
}

ConfocalScannerInterface& OdmrLogic::scanner() { return ctx().connector<ConfocalScannerInterface>("scanner"); }
MicrowaveInterface& OdmrLogic::microwave() { return ctx().connector<MicrowaveInterface>("microwave"); }

void OdmrLogic::output_off() {
  try {
    microwave().set_output(false);
  } catch (const std::exception& e) {
    ctx().log(LogLevel::error, std::string("could not switch microwave output off: ") + e.what());
  }
}

void OdmrLogic::on_deactivate() {
  stop_ = true;
  if (running_) {
    running_ = false;
    ctx().set_busy(false);
  }
  output_off();
}

std::uint64_t OdmrLogic::start_sweep(const SweepSettings& s) {
  if (ctx().busy()) fail(ErrorKind::Busy, "a measurement is already running");
  s.validate();
  // Probe both ends so out-of-range sweeps fail before anything starts.
  microwave().set_cw(s.f_stop, s.power);
  microwave().set_cw(s.f_start, s.power);

  record_ = OdmrRecord{};
  record_.run_id = next_run_id_++;
  record_.settings = s;
  record_.frequencies.resize(s.n_points);
  for (int k = 0; k < s.n_points; ++k) record_.frequencies[k] = s.frequency(k);
  record_.totals = Eigen::VectorXd::Zero(s.n_points);
  record_.mean = Eigen::VectorXd::Zero(s.n_points);
  record_.position = scanner().get_position();
  row_.resize(s.n_points);
  last_fit_.reset();
  last_error_.clear();
  stop_ = false;
  running_ = true;
  ctx().set_busy(true);
  const std::uint64_t id = record_.run_id;
  ctx().post([this] { step(0); });
  return id;
}

void OdmrLogic::step(int point) {
  if (!running_) return;
  if (stop_) return finish("");
  const SweepSettings& s = record_.settings;
  try {
    microwave().set_cw(record_.frequencies[point], s.power);
    microwave().set_output(true);
    const Eigen::VectorXd pair = scanner().scan_line(record_.position, record_.position, 2, s.dwell_s);
    row_[point] = (pair[0] + pair[1]) / 2;
  } catch (const Error& e) {
    return finish(e.what(), e.kind());
  } catch (const std::exception& e) {
    return finish(e.what(), ErrorKind::Internal);
  }
  if (point + 1 < s.n_points) {
    ctx().post([this, point] { step(point + 1); });
    return;
  }
  record_.totals += row_;
  ++record_.sweeps_done;
  record_.mean = record_.totals / static_cast<double>(record_.sweeps_done);
  record_.matrix.push_back(row_);
  while (record_.matrix.size() > OdmrRecord::kMaxRows) record_.matrix.pop_front();
  ctx().publish("odmr.sweep", {{"run_id", record_.run_id},
                               {"sweep_index", record_.sweeps_done - 1},
                               {"values", vector_to_json(row_)}});
  if (!s.continuous() && record_.sweeps_done >= s.n_sweeps) return finish("");
  ctx().post([this] { step(0); });
}

void OdmrLogic::finish(const std::string& error, ErrorKind kind) {
  output_off();
  running_ = false;
  last_error_ = error;
  last_error_kind_ = kind;
  if (!error.empty()) ctx().log(LogLevel::error, "sweep failed: " + error);
  Json done{{"run_id", record_.run_id}, {"sweeps_done", record_.sweeps_done}, {"stopped", bool(stop_)}};
  if (!error.empty()) done["error"] = {{"kind", to_string(kind)}, {"message", error}};
  // Published before going idle so that wait_idle observers see it; ops queue
  // behind this executor task anyway.
  ctx().publish("odmr.done", done);
  ctx().set_busy(false);
}

void OdmrLogic::stop_sweep() {
  if (!running_) return;
  stop_ = true;
  output_off();
}

fit::FitResult OdmrLogic::fit_resonance() {
  require(record_.sweeps_done >= 1, "no completed sweep to fit");
  last_fit_ = fit::fit_lorentz_dip(record_.frequencies, record_.mean, {"Hz", "counts/s"});
  return *last_fit_;
}

void register_odmr(ModuleRegistry& registry) {
  registry.add("odmr_logic", [](ModuleContext& ctx) { return std::make_unique<OdmrLogic>(ctx); });
}

}  // namespace labkit
