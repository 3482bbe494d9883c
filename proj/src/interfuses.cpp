#include "labkit/interfuses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace labkit {

namespace {

// Bin widths from centre spacing; the end bins mirror their neighbour.
Eigen::VectorXd bin_widths(const Eigen::VectorXd& c) {
  const Eigen::Index n = c.size();
  Eigen::VectorXd w(n);
  if (n == 1) {
    w[0] = 1.0;
    return w;
  }
  w[0] = c[1] - c[0];
  w[n - 1] = c[n - 1] - c[n - 2];
  for (Eigen::Index k = 1; k + 1 < n; ++k) w[k] = (c[k + 1] - c[k - 1]) / 2;
  return w;
}

}  // namespace

Interval spectral_range(const Spectrum& s) {
  require(s.wavelengths.size() >= 1 && s.wavelengths.size() == s.intensities.size(), "malformed spectrum");
  const Eigen::VectorXd w = bin_widths(s.wavelengths);
  const Eigen::Index n = s.wavelengths.size();
  return {s.wavelengths[0] - w[0] / 2, s.wavelengths[n - 1] + w[n - 1] / 2};
}

double integrate_window(const Spectrum& s, double lo, double hi) {
  require(lo < hi, "spectral window needs lambda_lo < lambda_hi");
  const Interval range = spectral_range(s);
  const Eigen::VectorXd w = bin_widths(s.wavelengths);
  const Eigen::Index n = s.wavelengths.size();

  // Knots of the piecewise-linear density.
  std::vector<double> x{range.min}, d{s.intensities[0] / w[0]};
  for (Eigen::Index k = 0; k < n; ++k) {
    x.push_back(s.wavelengths[k]);
    d.push_back(s.intensities[k] / w[k]);
  }
  x.push_back(range.max);
  d.push_back(d.back());

  const double a = std::max(lo, range.min), b = std::min(hi, range.max);
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    const double l = std::max(a, x[i]), r = std::min(b, x[i + 1]);
    if (!(r > l)) continue;
    const double span = x[i + 1] - x[i];
    auto at = [&](double t) { return d[i] + (d[i + 1] - d[i]) * (t - x[i]) / span; };
    total += (r - l) * (at(l) + at(r)) / 2;
  }
  return total;
}

SpectralScanner::SpectralScanner(ModuleContext& ctx)
    : Module(ctx), window_{ctx.option<double>("lambda_lo", 690.0), ctx.option<double>("lambda_hi", 710.0)} {
  if (!(window_.min < window_.max))
    fail(ErrorKind::Precondition, "module '" + ctx.name() + "': spectral window needs lambda_lo < lambda_hi");
  expose_interface(*this, *this);
  expose("get_window", [this](const Json&) { return Json(window_); });
}

ConfocalScannerInterface& SpectralScanner::inner() { return ctx().connector<ConfocalScannerInterface>("scanner"); }
SpectrometerInterface& SpectralScanner::spectrometer() {
  return ctx().connector<SpectrometerInterface>("spectrometer");
}

ScanVolume SpectralScanner::get_volume() { return inner().get_volume(); }
Position3 SpectralScanner::get_position() { return inner().get_position(); }
void SpectralScanner::set_position(const Position3& target) { inner().set_position(target); }

Eigen::VectorXd SpectralScanner::scan_line(const Position3& start, const Position3& end, int pixels,
                                           double dwell_s) {
  require(pixels >= 2, "scan_line needs at least 2 pixels");
  require(std::isfinite(dwell_s) && dwell_s > 0.0, "dwell time must be positive");
  Eigen::VectorXd out(pixels);
  for (int j = 0; j < pixels; ++j) {
    const double t = static_cast<double>(j) / static_cast<double>(pixels - 1);
    inner().set_position(
        {std::lerp(start.x, end.x, t), std::lerp(start.y, end.y, t), std::lerp(start.z, end.z, t)});
    const Spectrum s = spectrometer().acquire_spectrum(dwell_s);
    const Interval range = spectral_range(s);
    if (window_.min < range.min || window_.max > range.max)
      fail(ErrorKind::Precondition, "spectral window lies outside the spectrometer range");
    out[j] = integrate_window(s, window_.min, window_.max);
  }
  return out;
}

void to_json(nlohmann::json& j, const TiltPlane& t) {
  j = {{"reference", t.reference}, {"slope_x", t.slope_x}, {"slope_y", t.slope_y}};
}

void from_json(const nlohmann::json& j, TiltPlane& t) {
  t.reference = j.value("reference", Position3{});
  t.slope_x = j.value("slope_x", 0.0);
  t.slope_y = j.value("slope_y", 0.0);
}

TiltPlane calibrate_tilt(const Position3& p1, const Position3& p2, const Position3& p3) {
  const double ax = p2.x - p1.x, ay = p2.y - p1.y, az = p2.z - p1.z;
  const double bx = p3.x - p1.x, by = p3.y - p1.y, bz = p3.z - p1.z;
  const double det = ax * by - ay * bx;
  const double scale = std::max({std::abs(ax), std::abs(ay), std::abs(bx), std::abs(by)});
  if (!(std::abs(det) > 1e-12 * scale * scale))
    fail(ErrorKind::DegenerateGeometry, "calibration points are collinear in xy");
  return {p1, (az * by - ay * bz) / det, (ax * bz - az * bx) / det};
}

TiltScanner::TiltScanner(ModuleContext& ctx) : Module(ctx), max_slope_(ctx.option<double>("max_slope", 1.0)) {
  TiltPlane t;
  t.reference = ctx.option<Position3>("reference", Position3{});
  t.slope_x = ctx.option<double>("slope_x", 0.0);
  t.slope_y = ctx.option<double>("slope_y", 0.0);
  if (!(max_slope_ > 0)) fail(ErrorKind::Schema, "module '" + ctx.name() + "': max_slope must be positive");
  if (!(std::abs(t.slope_x) < max_slope_ && std::abs(t.slope_y) < max_slope_))
    fail(ErrorKind::Schema, "module '" + ctx.name() + "': tilt slopes exceed max_slope");
  tilt_ = t;
  expose_interface(*this, *this);
  expose("get_tilt", [this](const Json&) { return Json(tilt()); });
  expose("set_tilt", [this](const Json& p) {
    set_tilt(p.get<TiltPlane>());
    return Json(tilt());
  });
  expose("calibrate", [this](const Json& p) {
    set_tilt(calibrate_tilt(p.at("p1").get<Position3>(), p.at("p2").get<Position3>(),
                            p.at("p3").get<Position3>()));
    return Json(tilt());
  });
}

ConfocalScannerInterface& TiltScanner::inner() { return ctx().connector<ConfocalScannerInterface>("scanner"); }

TiltPlane TiltScanner::tilt() const {
  std::lock_guard lock(mutex_);
  return tilt_;
}

void TiltScanner::set_tilt(const TiltPlane& t) {
  if (!(std::isfinite(t.slope_x) && std::isfinite(t.slope_y)))
    fail(ErrorKind::OutOfRange, "tilt slopes must be finite");
  if (!(std::abs(t.slope_x) < max_slope_ && std::abs(t.slope_y) < max_slope_))
    fail(ErrorKind::OutOfRange, "tilt slope exceeds max_slope");
  std::lock_guard lock(mutex_);
  tilt_ = t;
}

ScanVolume TiltScanner::get_volume() {
  ScanVolume v = inner().get_volume();
  const TiltPlane t = tilt();
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (double x : {v.x.min, v.x.max})
    for (double y : {v.y.min, v.y.max}) {
      const double s = t.shear(x, y);
      lo = first ? s : std::min(lo, s);
      hi = first ? s : std::max(hi, s);
      first = false;
    }
  Interval z{v.z.min - lo, v.z.max - hi};
  if (z.min > z.max) z.min = z.max = (z.min + z.max) / 2;
  v.z = z;
  return v;
}

Position3 TiltScanner::get_position() { return tilt().from_inner(inner().get_position()); }

void TiltScanner::set_position(const Position3& target) { inner().set_position(tilt().to_inner(target)); }

Eigen::VectorXd TiltScanner::scan_line(const Position3& start, const Position3& end, int pixels, double dwell_s) {
  const TiltPlane t = tilt();
  return inner().scan_line(t.to_inner(start), t.to_inner(end), pixels, dwell_s);
}

void register_interfuses(ModuleRegistry& registry) {
  registry.add("spectral_scanner", [](ModuleContext& ctx) { return std::make_unique<SpectralScanner>(ctx); });
  registry.add("tilt_scanner", [](ModuleContext& ctx) { return std::make_unique<TiltScanner>(ctx); });
}

}  // namespace labkit
