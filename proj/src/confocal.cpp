#include "labkit/confocal.hpp"

#include <algorithm>
#include <cmath>

#include "labkit/recorder.hpp"

namespace labkit {

nlohmann::json to_json(const OptimizerResult& r) {
  return {{"refined", r.refined},
          {"accepted", r.accepted},
          {"reason", r.reason},
          {"fit_xy", r.fit_xy ? fit::to_json(*r.fit_xy) : nlohmann::json()},
          {"fit_z", r.fit_z ? fit::to_json(*r.fit_z) : nlohmann::json()}};
}

ConfocalLogic::ConfocalLogic(ModuleContext& ctx)
    : Module(ctx), history_depth_(static_cast<std::size_t>(std::max(1, ctx.option<int>("history", 10)))) {
  opt_.xy_size = ctx.option<double>("optimizer_xy_size", opt_.xy_size);
  opt_.xy_res = ctx.option<int>("optimizer_xy_res", opt_.xy_res);
  opt_.z_size = ctx.option<double>("optimizer_z_size", opt_.z_size);
  opt_.z_res = ctx.option<int>("optimizer_z_res", opt_.z_res);
  opt_.dwell_s = ctx.option<double>("optimizer_dwell_s", opt_.dwell_s);
  opt_.expected_w_xy = ctx.option<double>("expected_w_xy", opt_.expected_w_xy);
  opt_.expected_w_z = ctx.option<double>("expected_w_z", opt_.expected_w_z);
  if (!(opt_.xy_size > 0 && opt_.z_size > 0 && opt_.xy_res >= 5 && opt_.z_res >= 5 && opt_.dwell_s > 0))
    fail(ErrorKind::Schema, "module '" + ctx.name() + "': invalid optimizer options");

  expose("start_scan", [this](const Json& p) {
    return Json{{"scan_id", start_scan(p.get<ScanSettings>())}};
  });
  expose("stop_scan", [this](const Json&) {
    stop_scan();
    return Json();
  });
  expose("set_cursor", [this](const Json& p) {
    set_cursor(p.contains("position") ? p.at("position").get<Position3>() : p.get<Position3>());
    return Json();
  });
  expose("get_cursor", [this](const Json&) { return Json(cursor_); });
  expose("optimize_at", [this](const Json& p) {
    const Position3 at = p.contains("position") ? p.at("position").get<Position3>()
                         : p.contains("x")      ? p.get<Position3>()
                                                : cursor_;
    return to_json(optimize_at(at));
  });
  expose("get_image", [this](const Json& p) {
    return image_to_json(image(p.value("index", std::size_t{0})));
  });
  expose("save_image", [this](const Json& p) {
    const ScanImage& img = image(p.value("index", std::size_t{0}));
    const auto [data, svg] = this->ctx().recorder().save_image(
        p.value("tag", "confocal_" + std::string(to_string(img.settings.plane))), img);
    return Json{{"data", data.string()}, {"svg", svg.string()}};
  });
  expose("get_status", [this](const Json&) {
    return Json{{"busy", this->ctx().busy()},
                {"cursor", cursor_},
                {"scan_id", current_ ? current_->scan_id : 0},
                {"rows_complete", current_ ? current_->rows_complete : 0},
                {"images", history_.size()},
                {"last_error", last_error_.empty() ? Json() : Json(last_error_)}};
  });
}

ConfocalScannerInterface& ConfocalLogic::scanner() { return ctx().connector<ConfocalScannerInterface>("scanner"); }

void ConfocalLogic::on_activate() { cursor_ = scanner().get_position(); }

void ConfocalLogic::on_deactivate() {
  if (current_) {
    history_.push_front(std::move(*current_));
    current_.reset();
    while (history_.size() > history_depth_) history_.pop_back();
  }
}

std::uint64_t ConfocalLogic::start_scan(const ScanSettings& settings) {
  if (ctx().busy()) fail(ErrorKind::Busy, "a measurement is already running");
  settings.validate(scanner().get_volume());
  if (current_) history_.push_front(std::move(*current_));
  while (history_.size() > history_depth_) history_.pop_back();
  current_ = ScanImage::blank(settings, next_scan_id_++);
  stop_ = false;
  last_error_.clear();
  ctx().set_busy(true);
  ctx().post([this] { scan_row(0); });
  return current_->scan_id;
}

void ConfocalLogic::scan_row(int row) {
  if (stop_) return finish_scan("");
  ScanImage& img = *current_;
  const ScanSettings& s = img.settings;
  try {
    img.data.row(row) = scanner().scan_line(s.row_start(row), s.row_end(row), s.nx, s.dwell_s).transpose();
  } catch (const std::exception& e) {
    return finish_scan(e.what());
  }
  img.rows_complete = row + 1;
  ctx().publish("confocal.row", {{"scan_id", img.scan_id},
                                 {"row_index", row},
                                 {"values", vector_to_json(img.data.row(row).transpose())}});
  if (row + 1 < s.ny)
    ctx().post([this, row] { scan_row(row + 1); });
  else
    finish_scan("");
}

void ConfocalLogic::finish_scan(const std::string& error) {
  last_error_ = error;
  if (!error.empty()) ctx().log(LogLevel::error, "scan failed: " + error);
  try {
    scanner().set_position(cursor_);
  } catch (const std::exception& e) {
    ctx().log(LogLevel::warning, std::string("could not return to the cursor: ") + e.what());
  }
  const ScanImage& img = *current_;
  Json done{{"scan_id", img.scan_id}, {"rows_complete", img.rows_complete}, {"stopped", bool(stop_)}};
  if (!error.empty()) done["error"] = error;
  ctx().publish("confocal.done", done);
  ctx().set_busy(false);
}

void ConfocalLogic::stop_scan() { stop_ = true; }

void ConfocalLogic::set_cursor(const Position3& p) {
  if (!scanner().get_volume().contains(p)) fail(ErrorKind::OutOfRange, "cursor outside the scan volume");
  scanner().set_position(p);
  cursor_ = p;
}

const ScanImage& ConfocalLogic::image(std::size_t index) const {
  if (current_) {
    if (index == 0) return *current_;
    --index;
  }
  if (index >= history_.size()) fail(ErrorKind::Precondition, "no image at index " + std::to_string(index));
  return history_[index];
}

Eigen::MatrixXd ConfocalLogic::acquire(const ScanSettings& s) {
  Eigen::MatrixXd data(s.ny, s.nx);
  for (int i = 0; i < s.ny; ++i) {
    if (!ctx().active()) fail(ErrorKind::NotActive, "module deactivated during acquisition");
    data.row(i) = scanner().scan_line(s.row_start(i), s.row_end(i), s.nx, s.dwell_s).transpose();
  }
  return data;
}

namespace {

// Centre of a window of `size` that stays inside [lo, hi] (shrinks if needed).
std::pair<double, double> fit_window(double centre, double size, const Interval& range) {
  const double w = std::min(size, range.max - range.min);
  const double c = std::clamp(centre, range.min + w / 2, range.max - w / 2);
  return {c, w};
}

bool width_ok(double sigma, double expected_w) {
  const double expected_sigma = expected_w / 2.0;
  return sigma >= 0.2 * expected_sigma && sigma <= 5.0 * expected_sigma;
}

}  // namespace

OptimizerResult ConfocalLogic::optimize_at(const Position3& p) {
  if (ctx().busy()) fail(ErrorKind::Busy, "a measurement is already running");
  const ScanVolume volume = scanner().get_volume();
  if (!volume.contains(p)) fail(ErrorKind::OutOfRange, "optimizer start point outside the scan volume");

  ctx().set_busy(true);
  struct Idle {
    ModuleContext& c;
    ~Idle() { c.set_busy(false); }
  } idle{ctx()};

  OptimizerResult result;
  result.refined = p;
  auto reject = [&](std::string why) {
    result.accepted = false;
    result.reason = std::move(why);
    result.refined = p;
    scanner().set_position(p);
    ctx().publish("confocal.optimized", {{"result", to_json(result)}});
    return result;
  };

  ScanSettings crop;
  crop.plane = ScanPlane::xy;
  std::tie(crop.center.x, crop.width) = fit_window(p.x, opt_.xy_size, volume.x);
  std::tie(crop.center.y, crop.height) = fit_window(p.y, opt_.xy_size, volume.y);
  crop.center.z = p.z;
  crop.nx = crop.ny = opt_.xy_res;
  crop.dwell_s = opt_.dwell_s;
  if (!(crop.width > 0 && crop.height > 0)) return reject("scan volume too thin for the xy crop");

  const Eigen::MatrixXd xy_data = acquire(crop);
  Eigen::MatrixX2d xy(crop.nx * crop.ny, 2);
  Eigen::VectorXd z(crop.nx * crop.ny);
  for (int i = 0; i < crop.ny; ++i)
    for (int j = 0; j < crop.nx; ++j) {
      const int k = i * crop.nx + j;
      xy(k, 0) = crop.pixel_coordinate(j);
      xy(k, 1) = crop.row_coordinate(i);
      z[k] = xy_data(i, j);
    }
  try {
    result.fit_xy = fit::fit_gauss2d(xy, z, {"µm", "counts/s"});
  } catch (const Error& e) {
    return reject(std::string("xy fit: ") + e.what());
  }
  const auto& fxy = *result.fit_xy;
  const double x0 = fxy.value("x0"), y0 = fxy.value("y0");
  const auto [xlo, xhi] = crop.x_range();
  const auto [ylo, yhi] = crop.row_range();
  if (!(x0 >= xlo && x0 <= xhi && y0 >= ylo && y0 <= yhi)) return reject("xy centre outside the crop");
  if (!width_ok(fxy.value("sigma_x"), opt_.expected_w_xy) || !width_ok(fxy.value("sigma_y"), opt_.expected_w_xy))
    return reject("xy width outside the accepted range");

  const auto [zc, zw] = fit_window(p.z, opt_.z_size, volume.z);
  if (!(zw > 0)) return reject("scan volume too thin for the z line");
  const Position3 z_start{x0, y0, zc - zw / 2}, z_end{x0, y0, zc + zw / 2};
  const Eigen::VectorXd z_counts = scanner().scan_line(z_start, z_end, opt_.z_res, opt_.dwell_s);
  Eigen::VectorXd z_axis(opt_.z_res);
  for (int k = 0; k < opt_.z_res; ++k)
    z_axis[k] = std::lerp(z_start.z, z_end.z, static_cast<double>(k) / (opt_.z_res - 1));
  try {
    result.fit_z = fit::fit_gauss1d(z_axis, z_counts, {"µm", "counts/s"});
  } catch (const Error& e) {
    return reject(std::string("z fit: ") + e.what());
  }
  const double z0 = result.fit_z->value("x0");
  if (!(z0 >= z_start.z && z0 <= z_end.z)) return reject("z centre outside the line");
  if (!width_ok(result.fit_z->value("sigma"), opt_.expected_w_z)) return reject("z width outside the accepted range");

  result.accepted = true;
  result.refined = {x0, y0, z0};
  scanner().set_position(result.refined);
  cursor_ = result.refined;
  ctx().publish("confocal.optimized", {{"result", to_json(result)}});
  return result;
}

void register_confocal(ModuleRegistry& registry) {
  registry.add("confocal_logic", [](ModuleContext& ctx) { return std::make_unique<ConfocalLogic>(ctx); });
}

}  // namespace labkit
