#include <cmath>

#include <doctest.h>

#include "labkit/kernel.hpp"
#include "testkit.hpp"

using namespace labkit;
using namespace labkit::testkit;

namespace {

struct Bare : ConfocalScannerInterface, MicrowaveInterface, SpectrometerInterface {};

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Internal;
}

Configuration far_lab(double dark_rate = 10.0) {
  Json mods = Json::array({
      module_json("scanner", "hardware", "sim_scanner"),
      module_json("microwave", "hardware", "sim_microwave"),
      module_json("spectrometer", "hardware", "sim_spectrometer", Json::object(), {{"dark_rate", dark_rate}}),
      module_json("spectral", "logic", "spectral_scanner", {{"scanner", "scanner"}, {"spectrometer", "spectrometer"}}),
      module_json("tilt", "logic", "tilt_scanner", {{"scanner", "scanner"}}, {{"slope_x", 0.05}, {"slope_y", -0.02}}),
  });
  return config_of(mods, {{"seed", 5}});
}

}  // namespace

TEST_SUITE("interfaces") {
  TEST_CASE("unimplemented methods raise NotImplementedByHardware") {
    Bare b;
    const ErrorKind nih = ErrorKind::NotImplementedByHardware;
    CHECK(kind_of([&] { b.get_volume(); }) == nih);
    CHECK(kind_of([&] { b.get_position(); }) == nih);
    CHECK(kind_of([&] { b.set_position({}); }) == nih);
    CHECK(kind_of([&] { b.scan_line({}, {}, 5, 1e-3); }) == nih);
    CHECK(kind_of([&] { b.set_cw(2.87e9, 0); }) == nih);
    CHECK(kind_of([&] { b.set_output(true); }) == nih);
    CHECK(kind_of([&] { b.get_state(); }) == nih);
    CHECK(kind_of([&] { b.acquire_spectrum(1.0); }) == nih);
  }

  TEST_CASE("compliance: sim instruments") {
    Kernel k(far_lab(), test_options());
    for (const char* m : {"scanner", "microwave", "spectrometer"}) k.activate(m);
    check_scanner_contract(*guard_interface<ConfocalScannerInterface>(k, "scanner"));
    check_microwave_contract(*guard_interface<MicrowaveInterface>(k, "microwave"));
    check_spectrometer_contract(*guard_interface<SpectrometerInterface>(k, "spectrometer"));
  }

  TEST_CASE("compliance: interfuses") {
    Kernel k(far_lab(), test_options());
    k.activate("spectral");
    k.activate("tilt");
    check_scanner_contract(*guard_interface<ConfocalScannerInterface>(k, "spectral"));
    check_scanner_contract(*guard_interface<ConfocalScannerInterface>(k, "tilt"));
  }

  TEST_CASE("set_cw readback keeps the output flag; fresh source is off") {
    Kernel k(far_lab(), test_options());
    k.activate("microwave");
    auto mw = guard_interface<MicrowaveInterface>(k, "microwave");
    CHECK_FALSE(mw->get_state().on);
    mw->set_output(true);
    mw->set_cw(2.87e9, -10);
    CHECK(mw->get_state() == MicrowaveState{2.87e9, -10, true});
    CHECK(kind_of([&] { mw->set_cw(20e9, 0); }) == ErrorKind::OutOfRange);
    CHECK(mw->get_state() == MicrowaveState{2.87e9, -10, true});
  }

  TEST_CASE("interface calls through dispatch use the same JSON shapes") {
    Kernel k(far_lab(), test_options());
    k.activate("scanner");
    k.dispatch("scanner", "set_position", {{"x", 1.0}, {"y", 2.0}, {"z", 0.5}});
    CHECK(k.dispatch("scanner", "get_position") == Json{{"x", 1.0}, {"y", 2.0}, {"z", 0.5}});
    const Json line = k.dispatch("scanner", "scan_line",
                                 {{"start", {{"x", 0}, {"y", 0}, {"z", 0}}},
                                  {"end", {{"x", 1}, {"y", 0}, {"z", 0}}},
                                  {"pixels", 4},
                                  {"dwell_s", 1e-3}});
    CHECK(line.size() == 4);
    CHECK(k.dispatch("scanner", "get_volume") ==
          Json{{"x", {-10.0, 10.0}}, {"y", {-10.0, 10.0}}, {"z", {-5.0, 5.0}}});
  }

  TEST_CASE("spectrometer far from emitters reads the dark level") {
    Kernel k(far_lab(10.0), test_options());
    k.activate("spectrometer");
    k.activate("scanner");
    guard_interface<ConfocalScannerInterface>(k, "scanner")->set_position({9.5, 9.5, 4.5});
    auto sp = guard_interface<SpectrometerInterface>(k, "spectrometer");
    const double exposure = 1.0;
    const Spectrum s = sp->acquire_spectrum(exposure);
    const double total_counts = s.intensities.sum() * exposure;
    const double expected = 10.0 * exposure * static_cast<double>(s.intensities.size());
    CHECK(std::abs(total_counts - expected) <= 3.0 * std::sqrt(expected));
  }

  TEST_CASE("spectrometer counts scale linearly with exposure") {
    Kernel k(far_lab(), test_options());
    k.activate("spectrometer");
    k.activate("scanner");  // focus at the origin emitter
    auto sp = guard_interface<SpectrometerInterface>(k, "spectrometer");
    double c1 = 0, c2 = 0;
    for (int i = 0; i < 100; ++i) {
      c1 += sp->acquire_spectrum(1e-3).intensities.sum() * 1e-3;
      c2 += sp->acquire_spectrum(2e-3).intensities.sum() * 2e-3;
    }
    // Poisson totals: sd of the ratio from both counts.
    const double ratio = c2 / c1;
    const double sd = ratio * std::sqrt(1.0 / c1 + 1.0 / c2);
    CHECK(std::abs(ratio - 2.0) <= 5.0 * sd);
  }

  TEST_CASE("interface JSON codecs round-trip") {
    const ScanVolume v{{-1, 2}, {-3, 4}, {-5, 6}};
    CHECK(Json(v).get<ScanVolume>() == v);
    const MicrowaveState st{2.5e9, -3.5, true};
    CHECK(Json(st).get<MicrowaveState>() == st);
    Spectrum s;
    s.wavelengths = Eigen::VectorXd::LinSpaced(4, 600, 630);
    s.intensities = Eigen::VectorXd::Constant(4, 7.25);
    const Spectrum back = Json(s).get<Spectrum>();
    CHECK(back.wavelengths == s.wavelengths);
    CHECK(back.intensities == s.intensities);
  }
}
