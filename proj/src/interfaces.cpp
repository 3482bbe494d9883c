#include "labkit/interfaces.hpp"

#include <cmath>
#include <limits>

namespace labkit {

namespace {

[[noreturn]] void not_implemented(const char* method) {
  fail(ErrorKind::NotImplementedByHardware, std::string(method) + " is not implemented by this hardware");
}

}  // namespace

ScanVolume ConfocalScannerInterface::get_volume() { not_implemented("ConfocalScannerInterface::get_volume"); }
Position3 ConfocalScannerInterface::get_position() { not_implemented("ConfocalScannerInterface::get_position"); }
void ConfocalScannerInterface::set_position(const Position3&) {
  not_implemented("ConfocalScannerInterface::set_position");
}
Eigen::VectorXd ConfocalScannerInterface::scan_line(const Position3&, const Position3&, int, double) {
  not_implemented("ConfocalScannerInterface::scan_line");
}

void MicrowaveInterface::set_cw(double, double) { not_implemented("MicrowaveInterface::set_cw"); }
void MicrowaveInterface::set_output(bool) { not_implemented("MicrowaveInterface::set_output"); }
MicrowaveState MicrowaveInterface::get_state() { not_implemented("MicrowaveInterface::get_state"); }

Spectrum SpectrometerInterface::acquire_spectrum(double) {
  not_implemented("SpectrometerInterface::acquire_spectrum");
}

void to_json(nlohmann::json& j, const Interval& v) { j = nlohmann::json::array({v.min, v.max}); }

void from_json(const nlohmann::json& j, Interval& v) {
  require(j.is_array() && j.size() == 2, "interval must be [min, max]");
  v.min = j[0].get<double>();
  v.max = j[1].get<double>();
}

void to_json(nlohmann::json& j, const Position3& p) { j = {{"x", p.x}, {"y", p.y}, {"z", p.z}}; }

void from_json(const nlohmann::json& j, Position3& p) {
  if (j.is_array()) {
    require(j.size() == 3, "position array must have three entries");
    p = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
    return;
  }
  require(j.is_object(), "position must be an object {x, y, z}");
  p.x = j.at("x").get<double>();
  p.y = j.at("y").get<double>();
  p.z = j.at("z").get<double>();
}

void to_json(nlohmann::json& j, const ScanVolume& v) { j = {{"x", v.x}, {"y", v.y}, {"z", v.z}}; }

void from_json(const nlohmann::json& j, ScanVolume& v) {
  v.x = j.at("x").get<Interval>();
  v.y = j.at("y").get<Interval>();
  v.z = j.at("z").get<Interval>();
}

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isfinite(v[i]))
      out.push_back(v[i]);
    else
      out.push_back(nullptr);
  }
  return out;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  require(j.is_array(), "expected an array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i)
    v[static_cast<Eigen::Index>(i)] =
        j[i].is_null() ? std::numeric_limits<double>::quiet_NaN() : j[i].get<double>();
  return v;
}

void to_json(nlohmann::json& j, const Spectrum& s) {
  j = {{"wavelengths", vector_to_json(s.wavelengths)},
       {"intensities", vector_to_json(s.intensities)}};
}

void from_json(const nlohmann::json& j, Spectrum& s) {
  s.wavelengths = vector_from_json(j.at("wavelengths"));
  s.intensities = vector_from_json(j.at("intensities"));
}

void to_json(nlohmann::json& j, const MicrowaveState& s) {
  j = {{"frequency", s.frequency}, {"power", s.power}, {"on", s.on}};
}

void from_json(const nlohmann::json& j, MicrowaveState& s) {
  s.frequency = j.at("frequency").get<double>();
  s.power = j.at("power").get<double>();
  s.on = j.at("on").get<bool>();
}

}  // namespace labkit
