#pragma once

#include <string>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "labkit/error.hpp"

namespace labkit {

// Units are pinned at the interface: micrometres, Hz, dBm, seconds, counts/s,
// nanometres. Hardware modules convert.

struct Interval {
  double min = 0.0;
  double max = 0.0;

  bool contains(double v) const { return v >= min && v <= max; }
  bool operator==(const Interval&) const = default;
};

struct Position3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  bool operator==(const Position3&) const = default;
};

struct ScanVolume {
  Interval x, y, z;

  bool contains(const Position3& p) const {
    return x.contains(p.x) && y.contains(p.y) && z.contains(p.z);
  }
  bool operator==(const ScanVolume&) const = default;
};

struct Spectrum {
  Eigen::VectorXd wavelengths;  // nm, strictly ascending
  Eigen::VectorXd intensities;  // counts/s per bin
};

struct MicrowaveState {
  double frequency = 0.0;  // Hz
  double power = 0.0;      // dBm
  bool on = false;

  bool operator==(const MicrowaveState&) const = default;
};

// Every method fails with NotImplementedByHardware unless overridden.
class ConfocalScannerInterface {
 public:
  static constexpr const char* kName = "confocal_scanner";

  virtual ~ConfocalScannerInterface() = default;

  virtual ScanVolume get_volume();
  virtual Position3 get_position();
  virtual void set_position(const Position3& target);
  // Count rates at `pixels` equidistant points from start to end inclusive.
  // The focus is left at `end`.
  virtual Eigen::VectorXd scan_line(const Position3& start, const Position3& end, int pixels,
                                    double dwell_s);
};

class MicrowaveInterface {
 public:
  static constexpr const char* kName = "microwave";

  virtual ~MicrowaveInterface() = default;

  virtual void set_cw(double frequency_hz, double power_dbm);
  virtual void set_output(bool on);
  virtual MicrowaveState get_state();
};

class SpectrometerInterface {
 public:
  static constexpr const char* kName = "spectrometer";

  virtual ~SpectrometerInterface() = default;

  virtual Spectrum acquire_spectrum(double exposure_s);
};

// JSON shapes used by module operations and the wire protocol.
void to_json(nlohmann::json& j, const Interval& v);
void from_json(const nlohmann::json& j, Interval& v);
void to_json(nlohmann::json& j, const Position3& p);
void from_json(const nlohmann::json& j, Position3& p);
void to_json(nlohmann::json& j, const ScanVolume& v);
void from_json(const nlohmann::json& j, ScanVolume& v);
void to_json(nlohmann::json& j, const Spectrum& s);
void from_json(const nlohmann::json& j, Spectrum& s);
void to_json(nlohmann::json& j, const MicrowaveState& s);
void from_json(const nlohmann::json& j, MicrowaveState& s);

nlohmann::json vector_to_json(const Eigen::VectorXd& v);
Eigen::VectorXd vector_from_json(const nlohmann::json& j);

}  // namespace labkit
