#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <regex>
#include <sstream>

#include <doctest.h>

#include "labkit/events.hpp"
#include "labkit/recorder.hpp"
#include "testkit.hpp"

using namespace labkit;
using namespace labkit::testkit;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

bool same_bits(double a, double b) { return std::signbit(a) == std::signbit(b) && (a == b || (a != a && b != b)); }

std::string hex(const std::array<std::uint8_t, 3>& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

ScanImage small_image() {
  ScanSettings s;
  s.width = 1;
  s.height = 1;
  s.nx = 2;
  s.ny = 2;
  ScanImage img = ScanImage::blank(s, 7);
  img.data << 1.0, 2.0, 3.0, 4.0;
  img.rows_complete = 2;
  return img;
}

}  // namespace

TEST_SUITE("recorder") {
  TEST_CASE("numbers survive the text round trip exactly") {
    const double special[] = {0.0,
                              -0.0,
                              1.0,
                              -1.5,
                              0.1,
                              1e-300,
                              std::numeric_limits<double>::denorm_min(),
                              -std::numeric_limits<double>::denorm_min(),
                              4.9406564584124654e-320,
                              std::numeric_limits<double>::min(),
                              std::numeric_limits<double>::max(),
                              std::numeric_limits<double>::lowest(),
                              2.87e9,
                              1.0 / 3.0};
    for (double v : special) {
      CAPTURE(v);
      CHECK(same_bits(parse_number(format_number(v)), v));
    }
    CHECK(format_number(std::numeric_limits<double>::infinity()) == "inf");
    CHECK(format_number(-std::numeric_limits<double>::infinity()) == "-inf");
    CHECK(format_number(std::nan("")) == "nan");
    CHECK(std::isnan(parse_number("nan")));
    CHECK(format_number(0.1) == "0.1");

    std::mt19937_64 rng(3);
    for (int i = 0; i < 10'000; ++i) {
      const std::uint64_t bits = rng();
      double v;
      std::memcpy(&v, &bits, sizeof v);
      if (std::isnan(v)) continue;
      CHECK(same_bits(parse_number(format_number(v)), v));
    }
  }

  TEST_CASE("data files round trip through load_data") {
    TempDir dir;
    Recorder rec(dir.path, fixed_clock(test_time()), 42);
    Eigen::VectorXd a(4), b(4);
    a << 0.0, -0.0, std::numeric_limits<double>::denorm_min(), 1e308;
    b << 1.0, 2.5, -3.25, std::numeric_limits<double>::infinity();
    const fs::path p = rec.save_data("roundtrip", {{"note", "a\\b\nc"}, {"count", 3}, {"ratio", 0.1}},
                                     {{"a", a}, {"b", b}});
    const DataFile f = load_data(p);
    CHECK(f.header.at("count") == "3");
    CHECK(f.header.at("ratio") == "0.1");
    CHECK(f.header.at("seed") == "42");
    CHECK(f.header.at("software") == kSoftwareVersion);
    CHECK(f.header.at("timestamp") == "2025-01-01T00:00:00.000Z");
    CHECK(f.header.at("note").find('\n') == std::string::npos);
    REQUIRE(f.columns.size() == 2);
    CHECK(f.columns[0].first == "a");
    for (Eigen::Index i = 0; i < 4; ++i) {
      CHECK(same_bits(f.columns[0].second[i], a[i]));
      CHECK(same_bits(f.columns[1].second[i], b[i]));
    }
  }

  TEST_CASE("empty columns give a header-only file") {
    TempDir dir;
    Recorder rec(dir.path, fixed_clock(test_time()), 1);
    const fs::path p = rec.save_data("empty", {}, {{"x", Eigen::VectorXd()}, {"y", Eigen::VectorXd()}});
    const std::string text = slurp(p);
    CHECK(text.back() == '\n');
    CHECK(text.substr(text.rfind("# columns:")) == "# columns: x\ty\n");
    const DataFile f = load_data(p);
    REQUIRE(f.columns.size() == 2);
    CHECK(f.columns[0].second.size() == 0);
  }

  TEST_CASE("bad tags, keys and ragged columns are refused") {
    TempDir dir;
    Recorder rec(dir.path, fixed_clock(test_time()), 1);
    CHECK_THROWS_AS(rec.save_data("bad tag", {}, {}), Error);
    CHECK_THROWS_AS(rec.save_data("ok", {{"bad key", 1}}, {}), Error);
    CHECK_THROWS_AS(rec.save_data("ok", {}, {{"a", Eigen::VectorXd(2)}, {"b", Eigen::VectorXd(3)}}), Error);
  }

  TEST_CASE("file names: date folders and a suffix on collision") {
    TempDir dir;
    Recorder rec(dir.path, fixed_clock(test_time()), 1);
    const fs::path first = rec.save_data("run", {}, {});
    const fs::path second = rec.save_data("run", {}, {});
    const fs::path third = rec.save_data("run", {}, {});
    CHECK(first == dir.path / "2025" / "01" / "20250101-000000_run.dat");
    CHECK(second.filename() == "20250101-000000_run-1.dat");
    CHECK(third.filename() == "20250101-000000_run-2.dat");
    const fs::path plot = rec.save_plot_beside(second, Eigen::VectorXd::LinSpaced(3, 0, 1),
                                               Eigen::VectorXd::LinSpaced(3, 0, 1), {});
    CHECK(plot.filename() == "20250101-000000_run-1.svg");
  }

  TEST_CASE("saves announce themselves on the event bus") {
    TempDir dir;
    EventBus bus;
    auto sub = bus.subscribe({"recorder.*"});
    Recorder rec(dir.path, fixed_clock(test_time()), 1, &bus);
    const auto [dat, svg] = rec.save_image("img", small_image());
    const auto ev = sub->next(std::chrono::seconds(1));
    REQUIRE(ev);
    CHECK(ev->topic == "recorder.saved");
    CHECK(ev->payload.at("paths").size() == 2);
    CHECK(fs::exists(dat));
    CHECK(fs::exists(svg));
  }

  TEST_CASE("image files reload to the same matrix and settings") {
    TempDir dir;
    Recorder rec(dir.path, fixed_clock(test_time()), 1);
    ScanImage img = small_image();
    img.settings.center = {0.25, -1.5, 0.125};
    img.settings.plane = ScanPlane::xz;
    const auto paths = rec.save_image("img", img);
    const ScanImage back = load_image(paths.first);
    CHECK(back.data == img.data);
    CHECK(back.settings.plane == ScanPlane::xz);
    CHECK(back.settings.center == img.settings.center);
    CHECK(back.rows_complete == 2);
    CHECK(back.scan_id == 7);
  }

  TEST_CASE("a 2x2 heatmap has four cells coloured from the map ends") {
    const std::string svg = render_heatmap_svg(small_image());
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(count(svg, "class=\"cell\"") == 4);
    CHECK(count(svg, hex(viridis()[0]) + "\"/>") >= 1);
    CHECK(count(svg, hex(viridis()[255]) + "\"/>") >= 1);
    CHECK(viridis()[0] == std::array<std::uint8_t, 3>{0x44, 0x01, 0x54});
    CHECK(viridis()[255] == std::array<std::uint8_t, 3>{0xfd, 0xe7, 0x25});
  }

  TEST_CASE("rows not yet scanned are drawn in the gap colour") {
    ScanImage img = small_image();
    img.data.row(1).setConstant(std::numeric_limits<double>::quiet_NaN());
    img.rows_complete = 1;
    const std::string svg = render_heatmap_svg(img);
    CHECK(count(svg, std::string("fill=\"") + kGapColor + "\"") == 2);
    TempDir dir;
    Recorder rec(dir.path, fixed_clock(test_time()), 1);
    ScanImage none = small_image();
    none.rows_complete = 0;
    CHECK_THROWS_AS(rec.save_image("none", none), Error);
  }

  TEST_CASE("line plot with markers and a fit overlay") {
    const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(21, -1, 1);
    const Eigen::VectorXd y = (-x.array().square() * 8).exp().matrix();
    const std::string plain = render_plot_svg(x, y, {"t<1>", "x (µm)", "rate"});
    CHECK(count(plain, "class=\"data\"") == 1);
    CHECK(count(plain, "class=\"fit\"") == 0);
    CHECK(plain.find("t&lt;1&gt;") != std::string::npos);
    const fit::FitResult f = fit::fit_gauss1d(x, y);
    const std::string fitted = render_plot_svg(x, y, {"fit"}, &f);
    CHECK(count(fitted, "class=\"fit\"") == 1);
    const std::string single = render_plot_svg(Eigen::VectorXd::Constant(1, 2.0), Eigen::VectorXd::Constant(1, 5.0), {});
    CHECK(count(single, "class=\"marker\"") == 1);
  }
}
