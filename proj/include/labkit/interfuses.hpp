#pragma once

#include <mutex>

#include "labkit/module.hpp"

namespace labkit {

// Integral of a binned spectrum over [lo, hi] nm. The density I_k / width_k is
// interpolated linearly between bin centres and held constant over the outer
// half bins, so the full range integrates to sum(I) exactly up to rounding.
double integrate_window(const Spectrum& s, double lo, double hi);

// Outer edges of the binned range (half a bin beyond the first/last centre).
Interval spectral_range(const Spectrum& s);

// Scanner whose pixel values are spectrometer rates integrated over a
// wavelength window. Connectors `scanner` and `spectrometer`; options
// lambda_lo, lambda_hi (nm). The dwell time is used as exposure.
class SpectralScanner final : public Module, public ConfocalScannerInterface {
 public:
  explicit SpectralScanner(ModuleContext& ctx);

  ScanVolume get_volume() override;
  Position3 get_position() override;
  void set_position(const Position3& target) override;
  Eigen::VectorXd scan_line(const Position3& start, const Position3& end, int pixels, double dwell_s) override;

  Interval window() const { return window_; }

 private:
  ConfocalScannerInterface& inner();
  SpectrometerInterface& spectrometer();

  Interval window_;
};

struct TiltPlane {
  Position3 reference;
  double slope_x = 0.0;  // µm of z per µm of x
  double slope_y = 0.0;

  double shear(double x, double y) const { return slope_x * (x - reference.x) + slope_y * (y - reference.y); }
  Position3 to_inner(const Position3& p) const { return {p.x, p.y, p.z + shear(p.x, p.y)}; }
  Position3 from_inner(const Position3& p) const { return {p.x, p.y, p.z - shear(p.x, p.y)}; }
  TiltPlane inverse() const { return {reference, -slope_x, -slope_y}; }
};

void to_json(nlohmann::json& j, const TiltPlane& t);
void from_json(const nlohmann::json& j, TiltPlane& t);

// Plane through three points as slopes about p1. DegenerateGeometry when the
// points are collinear in (x, y).
TiltPlane calibrate_tilt(const Position3& p1, const Position3& p2, const Position3& p3);

// Scanner in tilt-corrected coordinates: z is measured from the plane.
// Connector `scanner`; options reference, slope_x, slope_y, max_slope (1).
// Operations get_tilt, set_tilt, calibrate in addition to the interface.
class TiltScanner final : public Module, public ConfocalScannerInterface {
 public:
  explicit TiltScanner(ModuleContext& ctx);

  // Virtual volume: the inner xy range and the z range reachable everywhere
  // in it, which shrinks as the tilt grows.
  ScanVolume get_volume() override;
  Position3 get_position() override;
  void set_position(const Position3& target) override;
  Eigen::VectorXd scan_line(const Position3& start, const Position3& end, int pixels, double dwell_s) override;

  TiltPlane tilt() const;
  void set_tilt(const TiltPlane& t);

 private:
  ConfocalScannerInterface& inner();

  mutable std::mutex mutex_;
  TiltPlane tilt_;
  double max_slope_;
};

void register_interfuses(ModuleRegistry& registry);

}  // namespace labkit
