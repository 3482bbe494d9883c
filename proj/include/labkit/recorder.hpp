#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "labkit/clock.hpp"
#include "labkit/fitting.hpp"
#include "labkit/scan.hpp"

namespace labkit {

class EventBus;

inline constexpr const char* kSoftwareVersion = "labkit 0.1.0";

// Header values: strings are written verbatim, numbers in shortest
// round-trip form, anything else as compact JSON.
using Metadata = std::map<std::string, nlohmann::json>;
// Column order is preserved.
using Columns = std::vector<std::pair<std::string, Eigen::VectorXd>>;

struct DataFile {
  std::map<std::string, std::string> header;
  Columns columns;
};

// Shortest text that parses back to exactly `v` ("nan", "inf", "-inf" for
// non-finite values).
std::string format_number(double v);
double parse_number(std::string_view text);

DataFile load_data(const std::filesystem::path& path);
// Rebuilds the matrix and settings written by save_image.
ScanImage load_image(const std::filesystem::path& path);

struct PlotLabels {
  std::string title;
  std::string x = "x";
  std::string y = "y";
};

// 256-entry colour table, index 0 = dark end.
const std::array<std::array<std::uint8_t, 3>, 256>& viridis();
inline constexpr const char* kGapColor = "#d9d9d9";

std::string render_heatmap_svg(const ScanImage& image);
std::string render_plot_svg(const Eigen::VectorXd& x, const Eigen::VectorXd& y, const PlotLabels& labels,
                            const fit::FitResult* fit = nullptr);

// Writes <data_dir>/YYYY/MM/YYYYMMDD-HHMMSS_<tag>[-n].dat (and .svg). A
// single mutex serialises writers; a stem is taken once any file carries it.
class Recorder {
 public:
  Recorder(std::filesystem::path data_dir, Clock clock, std::uint64_t seed, EventBus* events = nullptr);

  const std::filesystem::path& data_dir() const { return data_dir_; }

  std::filesystem::path save_data(const std::string& tag, const Metadata& metadata, const Columns& columns);
  // Returns (data path, svg path). Needs rows_complete >= 1.
  std::pair<std::filesystem::path, std::filesystem::path> save_image(const std::string& tag,
                                                                     const ScanImage& image,
                                                                     const Metadata& extra = {});
  std::filesystem::path save_plot(const std::string& tag, const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                                  const PlotLabels& labels, const fit::FitResult* fit = nullptr);
  // Plot written next to an existing data file (same stem, .svg).
  std::filesystem::path save_plot_beside(const std::filesystem::path& data_path, const Eigen::VectorXd& x,
                                         const Eigen::VectorXd& y, const PlotLabels& labels,
                                         const fit::FitResult* fit = nullptr);

 private:
  std::filesystem::path reserve_locked(const std::string& tag, const char* extension);
  void write_data_locked(const std::filesystem::path& path, const Metadata& metadata, const Columns& columns);
  void write_text_locked(const std::filesystem::path& path, const std::string& text);
  void announce(const std::string& kind, const std::vector<std::filesystem::path>& paths);

  std::filesystem::path data_dir_;
  Clock clock_;
  std::uint64_t seed_;
  EventBus* events_;
  std::mutex mutex_;
};

}  // namespace labkit
