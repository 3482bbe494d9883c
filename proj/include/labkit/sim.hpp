#pragma once

#include <cstdint>
#include <mutex>
#include <vector>

#include <nlohmann/json.hpp>

#include "labkit/interfaces.hpp"
#include "labkit/rng.hpp"

namespace labkit::sim {

struct Resonance {
  double f0 = 2.87e9;      // Hz
  double fwhm = 1e7;       // Hz
  double contrast = 0.25;  // fraction in (0, 1)
};

struct Emitter {
  Position3 position;
  double peak_rate = 5e4;     // counts/s at focus
  double w_xy = 0.15;         // lateral 1/e^2 radius, µm
  double w_z = 0.45;          // axial 1/e^2 radius, µm
  double line_center = 700;   // nm
  double line_width = 10;     // nm, 1 sigma
  std::vector<Resonance> resonances{Resonance{}};
};

struct SimSample {
  std::vector<Emitter> emitters;
  double background_rate = 2e3;
};

struct MwDrive {
  bool on = false;
  double frequency = 0.0;
};

// Fraction of fluorescence left by the CW drive: 1 - sum of Lorentzian dips.
double mw_factor(const Emitter& e, const MwDrive& mw);

// Confocal PSF weight of emitter e at focus p, in [0, 1].
double psf_weight(const Emitter& e, const Position3& p);

// Expected count rate at focus p.
double mean_rate(const SimSample& sample, const Position3& p, const MwDrive& mw);

// Poisson counts with mean mean_rate * dwell_s; round(mu) when noise is off.
std::uint64_t sample_counts(double mean_rate, double dwell_s, Rng& rng, bool noise = true);

ScanVolume default_volume();
SimSample default_sample();

// Sample description as found in sim scanner options. Missing keys take the
// defaults above; the whole default sample is used if "emitters" is absent.
SimSample sample_from_json(const nlohmann::json& options);
ScanVolume volume_from_json(const nlohmann::json& options);
nlohmann::json to_json(const SimSample& sample);

// State shared by the simulated instruments of one setup: the sample, the
// focus position and the microwave drive. Plays the part of the optical path
// that physically couples a scanner, a spectrometer and a microwave source.
class SimWorld {
 public:
  SimWorld(SimSample sample, ScanVolume volume)
      : sample_(std::move(sample)), volume_(volume) {}

  const SimSample& sample() const { return sample_; }
  const ScanVolume& volume() const { return volume_; }

  Position3 focus() const {
    std::lock_guard lock(mutex_);
    return focus_;
  }
  void set_focus(const Position3& p) {
    std::lock_guard lock(mutex_);
    focus_ = p;
  }
  MwDrive drive() const {
    std::lock_guard lock(mutex_);
    return drive_;
  }
  void set_drive(const MwDrive& d) {
    std::lock_guard lock(mutex_);
    drive_ = d;
  }

 private:
  const SimSample sample_;
  const ScanVolume volume_;
  mutable std::mutex mutex_;
  Position3 focus_;
  MwDrive drive_;
};

}  // namespace labkit::sim
