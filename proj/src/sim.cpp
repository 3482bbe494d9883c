#include "labkit/sim.hpp"

#include <cmath>
#include <numbers>

#include "labkit/error.hpp"

namespace labkit::sim {

double Rng::normal() {
  if (spare_valid_) {
    spare_valid_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  spare_valid_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::poisson(double mu) {
  if (!(mu > 0.0)) return 0;
  if (mu < 10.0) {
    const double u = uniform();
    double p = std::exp(-mu);
    double cdf = p;
    std::uint64_t k = 0;
    while (u > cdf && k < 1000) {
      ++k;
      p *= mu / static_cast<double>(k);
      cdf += p;
    }
    return k;
  }
  const double v = std::round(mu + std::sqrt(mu) * normal());
  return v > 0.0 ? static_cast<std::uint64_t>(v) : 0;
}

double mw_factor(const Emitter& e, const MwDrive& mw) {
  if (!mw.on) return 1.0;
  double s = 1.0;
  for (const auto& r : e.resonances) {
    const double h = r.fwhm / 2.0;
    const double d = mw.frequency - r.f0;
    s -= r.contrast * (h * h) / (d * d + h * h);
  }
  return s;
}

double psf_weight(const Emitter& e, const Position3& p) {
  const double dx = p.x - e.position.x;
  const double dy = p.y - e.position.y;
  const double dz = p.z - e.position.z;
  return std::exp(-2.0 * (dx * dx + dy * dy) / (e.w_xy * e.w_xy)) *
         std::exp(-2.0 * (dz * dz) / (e.w_z * e.w_z));
}

double mean_rate(const SimSample& sample, const Position3& p, const MwDrive& mw) {
  double rate = sample.background_rate;
  for (const auto& e : sample.emitters) rate += e.peak_rate * psf_weight(e, p) * mw_factor(e, mw);
  return rate;
}

std::uint64_t sample_counts(double mean_rate, double dwell_s, Rng& rng, bool noise) {
  const double mu = mean_rate * dwell_s;
  if (!noise) return mu > 0.0 ? static_cast<std::uint64_t>(std::llround(mu)) : 0;
  return rng.poisson(mu);
}

ScanVolume default_volume() { return {{-10.0, 10.0}, {-10.0, 10.0}, {-5.0, 5.0}}; }

SimSample default_sample() {
  SimSample s;
  for (const Position3 p : {Position3{0, 0, 0}, Position3{-5, 4, 1}, Position3{6, -3, -1.5},
                            Position3{3.5, 6.5, 2}, Position3{-6, -6, -0.5}}) {
    Emitter e;
    e.position = p;
    s.emitters.push_back(e);
  }
  return s;
}

namespace {

double positive(const nlohmann::json& j, const char* key, double fallback) {
  const double v = j.value(key, fallback);
  if (!(v > 0.0)) fail(ErrorKind::Schema, std::string("emitter field '") + key + "' must be positive");
  return v;
}

Emitter emitter_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorKind::Schema, "emitter must be an object");
  if (!j.contains("position")) fail(ErrorKind::Schema, "emitter is missing 'position'");
  Emitter e;
  e.position = j.at("position").get<Position3>();
  e.peak_rate = positive(j, "peak_rate", e.peak_rate);
  e.w_xy = positive(j, "w_xy", e.w_xy);
  e.w_z = positive(j, "w_z", e.w_z);
  e.line_center = positive(j, "line_center", e.line_center);
  e.line_width = positive(j, "line_width", e.line_width);
  if (j.contains("resonances")) {
    e.resonances.clear();
    for (const auto& r : j.at("resonances")) {
      Resonance res;
      res.f0 = positive(r, "f0", res.f0);
      res.fwhm = positive(r, "fwhm", res.fwhm);
      res.contrast = r.value("contrast", res.contrast);
      if (!(res.contrast > 0.0 && res.contrast < 1.0))
        fail(ErrorKind::Schema, "resonance contrast must lie in (0, 1)");
      e.resonances.push_back(res);
    }
  }
  return e;
}

}  // namespace

SimSample sample_from_json(const nlohmann::json& options) {
  SimSample s = options.contains("emitters") ? SimSample{} : default_sample();
  if (options.contains("emitters")) {
    const auto& list = options.at("emitters");
    if (!list.is_array()) fail(ErrorKind::Schema, "'emitters' must be an array");
    for (const auto& e : list) s.emitters.push_back(emitter_from_json(e));
  }
  s.background_rate = options.value("background_rate", s.background_rate);
  if (!(s.background_rate >= 0.0)) fail(ErrorKind::Schema, "'background_rate' must be >= 0");
  return s;
}

ScanVolume volume_from_json(const nlohmann::json& options) {
  if (!options.contains("volume")) return default_volume();
  const auto v = options.at("volume").get<ScanVolume>();
  for (const Interval& i : {v.x, v.y, v.z})
    if (!(i.min <= i.max)) fail(ErrorKind::Schema, "scan volume needs min <= max on every axis");
  return v;
}

nlohmann::json to_json(const SimSample& sample) {
  nlohmann::json emitters = nlohmann::json::array();
  for (const auto& e : sample.emitters) {
    nlohmann::json res = nlohmann::json::array();
    for (const auto& r : e.resonances)
      res.push_back({{"f0", r.f0}, {"fwhm", r.fwhm}, {"contrast", r.contrast}});
    emitters.push_back({{"position", e.position},
                        {"peak_rate", e.peak_rate},
                        {"w_xy", e.w_xy},
                        {"w_z", e.w_z},
                        {"line_center", e.line_center},
                        {"line_width", e.line_width},
                        {"resonances", res}});
  }
  return {{"emitters", emitters}, {"background_rate", sample.background_rate}};
}

}  // namespace labkit::sim
