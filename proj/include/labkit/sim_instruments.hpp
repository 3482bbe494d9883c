#pragma once

#include <memory>

#include "labkit/module.hpp"
#include "labkit/sim.hpp"

namespace labkit::sim {

// World shared by all sim instruments whose `world` option matches (default
// "default"). The sample and volume come from the options of the sim_scanner
// in that world, or the default sample when there is none.
std::shared_ptr<SimWorld> world_for(ModuleContext& ctx);

// Options: volume, emitters, background_rate, noise (true), emulate_timing
// (false), world.
class SimScanner final : public Module, public ConfocalScannerInterface {
 public:
  explicit SimScanner(ModuleContext& ctx);

  void on_activate() override;

  ScanVolume get_volume() override;
  Position3 get_position() override;
  void set_position(const Position3& target) override;
  Eigen::VectorXd scan_line(const Position3& start, const Position3& end, int pixels, double dwell_s) override;

 private:
  std::shared_ptr<SimWorld> world_;
  Rng rng_;
  bool noise_;
  bool emulate_timing_;
};

// Options: min_frequency (1e9), max_frequency (6e9), min_power (-120),
// max_power (30), world. Power is recorded but has no effect on the sample.
class SimMicrowave final : public Module, public MicrowaveInterface {
 public:
  explicit SimMicrowave(ModuleContext& ctx);

  void on_activate() override;
  void on_deactivate() override;

  void set_cw(double frequency_hz, double power_dbm) override;
  void set_output(bool on) override;
  MicrowaveState get_state() override;

 private:
  void publish_drive();

  std::shared_ptr<SimWorld> world_;
  Interval frequency_limits_;
  Interval power_limits_;
  MicrowaveState state_;
};

// Gaussian emission lines binned on a uniform grid, weighted by the PSF at the
// shared focus. Options: lambda_min (600), lambda_max (800), bins (200),
// dark_rate (10 counts/s per bin), noise, emulate_timing, world.
class SimSpectrometer final : public Module, public SpectrometerInterface {
 public:
  explicit SimSpectrometer(ModuleContext& ctx);

  void on_activate() override;

  Spectrum acquire_spectrum(double exposure_s) override;

  // Noise-free per-bin rates at focus p.
  Eigen::VectorXd expected_rates(const Position3& p, const MwDrive& mw) const;
  const Eigen::VectorXd& wavelengths() const { return centres_; }

 private:
  std::shared_ptr<SimWorld> world_;
  Rng rng_;
  Eigen::VectorXd edges_;
  Eigen::VectorXd centres_;
  double dark_rate_;
  bool noise_;
  bool emulate_timing_;
};

void register_sim_instruments(ModuleRegistry& registry);

}  // namespace labkit::sim
