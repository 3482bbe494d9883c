#pragma once

#include <atomic>
#include <deque>
#include <optional>
#include <string>

#include "labkit/fitting.hpp"
#include "labkit/module.hpp"
#include "labkit/scan.hpp"

namespace labkit {

struct OptimizerResult {
  Position3 refined;
  std::optional<fit::FitResult> fit_xy;
  std::optional<fit::FitResult> fit_z;
  bool accepted = false;
  std::string reason;  // why a result was rejected; empty when accepted
};

nlohmann::json to_json(const OptimizerResult& r);

struct OptimizerOptions {
  double xy_size = 1.0;  // µm, square crop
  int xy_res = 21;
  double z_size = 2.0;  // µm
  int z_res = 41;
  double dwell_s = 5e-3;
  double expected_w_xy = 0.15;  // PSF 1/e^2 radii used by the width gate
  double expected_w_z = 0.45;
};

// Raster scans, cursor and the close-range position optimiser. Connector
// `scanner` (any ConfocalScannerInterface). Operations: start_scan, stop_scan,
// set_cursor, get_cursor, optimize_at, get_image, save_image, get_status.
class ConfocalLogic final : public Module {
 public:
  explicit ConfocalLogic(ModuleContext& ctx);

  void on_activate() override;
  void on_deactivate() override;

  std::uint64_t start_scan(const ScanSettings& settings);
  void stop_scan();
  void set_cursor(const Position3& p);
  Position3 get_cursor() const { return cursor_; }
  OptimizerResult optimize_at(const Position3& p);
  // index 0 = most recent (or the scan in progress).
  const ScanImage& image(std::size_t index = 0) const;

  const OptimizerOptions& optimizer_options() const { return opt_; }

 private:
  ConfocalScannerInterface& scanner();
  void scan_row(int row);
  void finish_scan(const std::string& error);
  Eigen::MatrixXd acquire(const ScanSettings& s);

  OptimizerOptions opt_;
  std::size_t history_depth_;
  Position3 cursor_;
  std::deque<ScanImage> history_;
  std::optional<ScanImage> current_;
  std::uint64_t next_scan_id_ = 1;
  std::atomic<bool> stop_{false};
  std::string last_error_;
};

void register_confocal(ModuleRegistry& registry);

}  // namespace labkit
