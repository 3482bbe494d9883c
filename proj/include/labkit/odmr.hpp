#pragma once

#include <atomic>
#include <deque>
#include <optional>
#include <string>

#include "labkit/fitting.hpp"
#include "labkit/module.hpp"

namespace labkit {

struct SweepSettings {
  double f_start = 2.77e9;  // Hz
  double f_stop = 2.97e9;   // Hz
  int n_points = 101;
  double power = -20.0;  // dBm
  double dwell_s = 2e-3;
  int n_sweeps = 1;  // 0 = continuous

  bool continuous() const { return n_sweeps == 0; }
  // f_start + k (f_stop - f_start) / (n_points - 1), endpoints exact.
  double frequency(int k) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const SweepSettings& s);
void from_json(const nlohmann::json& j, SweepSettings& s);

struct OdmrRecord {
  static constexpr std::size_t kMaxRows = 500;

  std::uint64_t run_id = 0;
  SweepSettings settings;
  Eigen::VectorXd frequencies;
  std::deque<Eigen::VectorXd> matrix;  // most recent kMaxRows sweeps, oldest first
  Eigen::VectorXd totals;              // column sums over every completed sweep, in order
  Eigen::VectorXd mean;                // totals / sweeps_done
  int sweeps_done = 0;
  Position3 position;

  // Index of matrix.front() among all sweeps of the run.
  int first_row() const { return sweeps_done - static_cast<int>(matrix.size()); }
};

nlohmann::json to_json(const OdmrRecord& r);

// Connectors `scanner` (fluorescence at the focus via a two-pixel scan_line)
// and `microwave`. Operations: start_sweep, stop_sweep, fit_resonance,
// get_record, get_status, save.
class OdmrLogic final : public Module {
 public:
  explicit OdmrLogic(ModuleContext& ctx);

  void on_deactivate() override;

  std::uint64_t start_sweep(const SweepSettings& s);
  void stop_sweep();
  fit::FitResult fit_resonance();
  const OdmrRecord& record() const { return record_; }

 private:
  ConfocalScannerInterface& scanner();
  MicrowaveInterface& microwave();
  void step(int point);
  void finish(const std::string& error, ErrorKind kind = ErrorKind::Internal);
  void output_off();

  OdmrRecord record_;
  Eigen::VectorXd row_;
  std::uint64_t next_run_id_ = 1;
  std::atomic<bool> stop_{false};
  bool running_ = false;
  std::optional<fit::FitResult> last_fit_;
  std::string last_error_;
  ErrorKind last_error_kind_ = ErrorKind::Internal;
};

void register_odmr(ModuleRegistry& registry);

}  // namespace labkit
