#include "labkit/sim_instruments.hpp"

#include <chrono>
#include <cmath>
#include <thread>

namespace labkit::sim {

std::shared_ptr<SimWorld> world_for(ModuleContext& ctx) {
  const std::string world = ctx.option<std::string>("world", "default");
  return ctx.shared<SimWorld>("sim.world." + world, [&] {
    for (const auto& spec : ctx.config().modules) {
      if (spec.kind != "sim_scanner" || spec.remote_address) continue;
      if (spec.options.value("world", std::string("default")) != world) continue;
      return std::make_shared<SimWorld>(sample_from_json(spec.options), volume_from_json(spec.options));
    }
    return std::make_shared<SimWorld>(default_sample(), default_volume());
  });
}

namespace {

void sleep_until_elapsed(std::chrono::steady_clock::time_point t0, double seconds) {
  std::this_thread::sleep_until(t0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                         std::chrono::duration<double>(seconds)));
}

void check_in_volume(const ScanVolume& v, const Position3& p) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) || !v.contains(p))
    fail(ErrorKind::OutOfRange, "position (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ", " +
                                    std::to_string(p.z) + ") is outside the scan volume");
}

}  // namespace

SimScanner::SimScanner(ModuleContext& ctx)
    : Module(ctx),
      world_(world_for(ctx)),
      noise_(ctx.option<bool>("noise", true)),
      emulate_timing_(ctx.option<bool>("emulate_timing", false)) {
  expose_interface(*this, *this);
}

void SimScanner::on_activate() {
  rng_ = Rng(ctx().seed(), ctx().name());
  const ScanVolume& v = world_->volume();
  const Position3 origin{};
  world_->set_focus(v.contains(origin) ? origin
                                       : Position3{(v.x.min + v.x.max) / 2, (v.y.min + v.y.max) / 2,
                                                   (v.z.min + v.z.max) / 2});
}

ScanVolume SimScanner::get_volume() { return world_->volume(); }

Position3 SimScanner::get_position() { return world_->focus(); }

void SimScanner::set_position(const Position3& target) {
  check_in_volume(world_->volume(), target);
  world_->set_focus(target);
}

Eigen::VectorXd SimScanner::scan_line(const Position3& start, const Position3& end, int pixels, double dwell_s) {
  require(pixels >= 2, "scan_line needs at least 2 pixels");
  require(std::isfinite(dwell_s) && dwell_s > 0.0, "dwell time must be positive");
  check_in_volume(world_->volume(), start);
  check_in_volume(world_->volume(), end);
  const auto t0 = std::chrono::steady_clock::now();
  Eigen::VectorXd out(pixels);
  for (int j = 0; j < pixels; ++j) {
    const double t = static_cast<double>(j) / static_cast<double>(pixels - 1);
    const Position3 p{std::lerp(start.x, end.x, t), std::lerp(start.y, end.y, t), std::lerp(start.z, end.z, t)};
    world_->set_focus(p);
    const double mu = mean_rate(world_->sample(), p, world_->drive());
    // Noise-free mode reports the expected rate itself rather than
    // round(mu * dwell) / dwell, so images can be compared bit for bit.
    out[j] = noise_ ? static_cast<double>(sample_counts(mu, dwell_s, rng_)) / dwell_s : mu;
  }
  world_->set_focus(end);
  if (emulate_timing_) sleep_until_elapsed(t0, pixels * dwell_s);
  return out;
}

SimMicrowave::SimMicrowave(ModuleContext& ctx)
    : Module(ctx),
      world_(world_for(ctx)),
      frequency_limits_{ctx.option<double>("min_frequency", 1e9), ctx.option<double>("max_frequency", 6e9)},
      power_limits_{ctx.option<double>("min_power", -120.0), ctx.option<double>("max_power", 30.0)} {
  expose_interface(*this, *this);
}

void SimMicrowave::publish_drive() { world_->set_drive({state_.on, state_.frequency}); }

void SimMicrowave::on_activate() {
  state_ = {2.87e9, -20.0, false};
  if (!frequency_limits_.contains(state_.frequency)) state_.frequency = frequency_limits_.min;
  publish_drive();
}

void SimMicrowave::on_deactivate() {
  state_.on = false;
  publish_drive();
}

void SimMicrowave::set_cw(double frequency_hz, double power_dbm) {
  if (!std::isfinite(frequency_hz) || !frequency_limits_.contains(frequency_hz))
    fail(ErrorKind::OutOfRange, "frequency " + std::to_string(frequency_hz) + " Hz is outside [" +
                                    std::to_string(frequency_limits_.min) + ", " +
                                    std::to_string(frequency_limits_.max) + "]");
  if (!std::isfinite(power_dbm) || !power_limits_.contains(power_dbm))
    fail(ErrorKind::OutOfRange, "power " + std::to_string(power_dbm) + " dBm is outside the device range");
  state_.frequency = frequency_hz;
  state_.power = power_dbm;
  publish_drive();
}

void SimMicrowave::set_output(bool on) {
  state_.on = on;
  publish_drive();
}

MicrowaveState SimMicrowave::get_state() { return state_; }

SimSpectrometer::SimSpectrometer(ModuleContext& ctx)
    : Module(ctx),
      world_(world_for(ctx)),
      dark_rate_(ctx.option<double>("dark_rate", 10.0)),
      noise_(ctx.option<bool>("noise", true)),
      emulate_timing_(ctx.option<bool>("emulate_timing", false)) {
  const double lo = ctx.option<double>("lambda_min", 600.0);
  const double hi = ctx.option<double>("lambda_max", 800.0);
  const int bins = ctx.option<int>("bins", 200);
  if (!(hi > lo) || bins < 2) fail(ErrorKind::Schema, "spectrometer needs lambda_min < lambda_max and >= 2 bins");
  if (!(dark_rate_ >= 0.0)) fail(ErrorKind::Schema, "dark_rate must be >= 0");
  edges_.resize(bins + 1);
  for (int k = 0; k <= bins; ++k) edges_[k] = std::lerp(lo, hi, static_cast<double>(k) / bins);
  centres_ = (edges_.head(bins) + edges_.tail(bins)) / 2.0;
  expose_interface(*this, *this);
}

void SimSpectrometer::on_activate() { rng_ = Rng(ctx().seed(), ctx().name()); }

Eigen::VectorXd SimSpectrometer::expected_rates(const Position3& p, const MwDrive& mw) const {
  Eigen::VectorXd rates = Eigen::VectorXd::Constant(centres_.size(), dark_rate_);
  for (const auto& e : world_->sample().emitters) {
    const double signal = e.peak_rate * psf_weight(e, p) * mw_factor(e, mw);
    if (signal == 0.0) continue;
    const double scale = 1.0 / (e.line_width * std::sqrt(2.0));
    for (Eigen::Index k = 0; k < centres_.size(); ++k) {
      const double frac = 0.5 * (std::erf((edges_[k + 1] - e.line_center) * scale) -
                                 std::erf((edges_[k] - e.line_center) * scale));
      rates[k] += signal * frac;
    }
  }
  return rates;
}

Spectrum SimSpectrometer::acquire_spectrum(double exposure_s) {
  require(std::isfinite(exposure_s) && exposure_s > 0.0, "exposure must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  Spectrum s;
  s.wavelengths = centres_;
  s.intensities = expected_rates(world_->focus(), world_->drive());
  if (noise_)
    for (Eigen::Index k = 0; k < s.intensities.size(); ++k)
      s.intensities[k] = static_cast<double>(sample_counts(s.intensities[k], exposure_s, rng_)) / exposure_s;
  if (emulate_timing_) sleep_until_elapsed(t0, exposure_s);
  return s;
}

void register_sim_instruments(ModuleRegistry& registry) {
  registry.add("sim_scanner", [](ModuleContext& ctx) { return std::make_unique<SimScanner>(ctx); });
  registry.add("sim_microwave", [](ModuleContext& ctx) { return std::make_unique<SimMicrowave>(ctx); });
  registry.add("sim_spectrometer", [](ModuleContext& ctx) { return std::make_unique<SimSpectrometer>(ctx); });
}

}  // namespace labkit::sim
