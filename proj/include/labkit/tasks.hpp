#pragma once

#include <vector>

#include "labkit/confocal.hpp"
#include "labkit/module.hpp"
#include "labkit/odmr.hpp"

namespace labkit {

struct SpotOutcome {
  int spot_index = 0;
  Position3 spot;
  Json optimizer;        // OptimizerResult as JSON, null if the spot failed earlier
  Json fit;              // FitResult as JSON, null when skipped
  std::string data_path;  // empty when skipped
  std::string svg_path;
  std::string error;  // non-fatal failure of this spot
};

nlohmann::json to_json(const SpotOutcome& s);

// Multi-spot ODMR. Connectors `confocal` and `odmr` (logic modules). The
// single operation run_multispot {spots, sweep, tag} runs synchronously on
// this module's loop and returns one entry per spot.
class MultispotTask final : public Module {
 public:
  explicit MultispotTask(ModuleContext& ctx);

  std::vector<SpotOutcome> run(const std::vector<Position3>& spots, const SweepSettings& sweep,
                               const std::string& tag = "multispot");

 private:
  Json call(const std::string& slot, const std::string& op, const Json& params = Json::object());
  void progress(int index, const char* phase);
};

// GUI-layer module standing for the browser panel: forwards operations to
// the logic modules bound to its connectors, so layer rules apply to every
// UI-originated call. Operations describe and forward {slot, op, params}.
class WebPanel final : public Module {
 public:
  explicit WebPanel(ModuleContext& ctx);
};

void register_tasks(ModuleRegistry& registry);

}  // namespace labkit
