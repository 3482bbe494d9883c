#include "labkit/scan.hpp"

#include <cmath>
#include <limits>

namespace labkit {

std::string_view to_string(ScanPlane plane) { return plane == ScanPlane::xy ? "xy" : "xz"; }

std::pair<double, double> ScanSettings::x_range() const {
  return {center.x - width / 2.0, center.x + width / 2.0};
}

std::pair<double, double> ScanSettings::row_range() const {
  const double c = plane == ScanPlane::xy ? center.y : center.z;
  return {c - height / 2.0, c + height / 2.0};
}

double ScanSettings::pixel_coordinate(int j) const {
  const auto [lo, hi] = x_range();
  return std::lerp(lo, hi, static_cast<double>(j) / static_cast<double>(nx - 1));
}

double ScanSettings::row_coordinate(int i) const {
  const auto [lo, hi] = row_range();
  return std::lerp(lo, hi, static_cast<double>(i) / static_cast<double>(ny - 1));
}

Position3 ScanSettings::row_start(int i) const {
  const double r = row_coordinate(i);
  const double x = x_range().first;
  return plane == ScanPlane::xy ? Position3{x, r, center.z} : Position3{x, center.y, r};
}

Position3 ScanSettings::row_end(int i) const {
  const double r = row_coordinate(i);
  const double x = x_range().second;
  return plane == ScanPlane::xy ? Position3{x, r, center.z} : Position3{x, center.y, r};
}

void ScanSettings::validate(const ScanVolume& volume) const {
  require(nx >= 2 && ny >= 2, "scan resolution must be at least 2 x 2");
  require(width > 0.0 && height > 0.0, "scan extents must be positive");
  require(dwell_s > 0.0, "dwell time must be positive");
  const auto [x0, x1] = x_range();
  const auto [r0, r1] = row_range();
  const Interval& rows = plane == ScanPlane::xy ? volume.y : volume.z;
  const double fixed = plane == ScanPlane::xy ? center.z : center.y;
  const Interval& fixed_axis = plane == ScanPlane::xy ? volume.z : volume.y;
  if (!volume.x.contains(x0) || !volume.x.contains(x1) || !rows.contains(r0) ||
      !rows.contains(r1) || !fixed_axis.contains(fixed))
    fail(ErrorKind::OutOfRange, "scan rectangle exceeds the scanner volume");
}

ScanImage ScanImage::blank(const ScanSettings& settings, std::uint64_t scan_id) {
  ScanImage image;
  image.settings = settings;
  image.data = Eigen::MatrixXd::Constant(settings.ny, settings.nx,
                                         std::numeric_limits<double>::quiet_NaN());
  image.scan_id = scan_id;
  return image;
}

void to_json(nlohmann::json& j, const ScanSettings& s) {
  j = {{"plane", std::string(to_string(s.plane))},
       {"center", s.center},
       {"extent", {s.width, s.height}},
       {"resolution", {s.nx, s.ny}},
       {"dwell_s", s.dwell_s}};
}

void from_json(const nlohmann::json& j, ScanSettings& s) {
  const std::string plane = j.value("plane", std::string("xy"));
  require(plane == "xy" || plane == "xz", "plane must be 'xy' or 'xz'");
  s.plane = plane == "xy" ? ScanPlane::xy : ScanPlane::xz;
  if (j.contains("center")) s.center = j.at("center").get<Position3>();
  if (j.contains("extent")) {
    const auto& e = j.at("extent");
    require(e.is_array() && e.size() == 2, "extent must be [width, height]");
    s.width = e[0].get<double>();
    s.height = e[1].get<double>();
  }
  if (j.contains("resolution")) {
    const auto& r = j.at("resolution");
    require(r.is_array() && r.size() == 2, "resolution must be [nx, ny]");
    s.nx = r[0].get<int>();
    s.ny = r[1].get<int>();
  }
  s.dwell_s = j.value("dwell_s", s.dwell_s);
}

nlohmann::json image_to_json(const ScanImage& image) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < image.data.rows(); ++i)
    rows.push_back(vector_to_json(image.data.row(i).transpose()));
  return {{"scan_id", image.scan_id},
          {"settings", image.settings},
          {"rows_complete", image.rows_complete},
          {"data", std::move(rows)}};
}

}  // namespace labkit
