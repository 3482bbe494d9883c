#pragma once

#include <cstdint>
#include <utility>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "labkit/interfaces.hpp"

namespace labkit {

enum class ScanPlane { xy, xz };

std::string_view to_string(ScanPlane plane);

struct ScanSettings {
  ScanPlane plane = ScanPlane::xy;
  Position3 center;
  double width = 10.0;   // µm along the pixel (x) axis
  double height = 10.0;  // µm along the row (y or z) axis
  int nx = 50;
  int ny = 50;
  double dwell_s = 1e-3;

  // Pixel j of row i sits at lerp(min, max, j / (nx - 1)) on x and
  // lerp(min, max, i / (ny - 1)) on the row axis. Rows run bottom to top.
  double pixel_coordinate(int j) const;
  double row_coordinate(int i) const;
  Position3 row_start(int i) const;
  Position3 row_end(int i) const;
  std::pair<double, double> x_range() const;
  std::pair<double, double> row_range() const;

  // Throws Precondition for bad shapes, OutOfRange if the rectangle leaves `volume`.
  void validate(const ScanVolume& volume) const;
};

// ny x nx counts/s, row 0 at the bottom. Rows not yet acquired hold NaN.
struct ScanImage {
  ScanSettings settings;
  Eigen::MatrixXd data;
  int rows_complete = 0;
  std::uint64_t scan_id = 0;

  static ScanImage blank(const ScanSettings& settings, std::uint64_t scan_id = 0);
};

void to_json(nlohmann::json& j, const ScanSettings& s);
void from_json(const nlohmann::json& j, ScanSettings& s);
nlohmann::json image_to_json(const ScanImage& image);

}  // namespace labkit
