#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace labkit {

using Json = nlohmann::json;

enum class Layer { hardware, logic, gui };

std::string_view to_string(Layer layer);
std::optional<Layer> parse_layer(std::string_view text);

// Static layer adjacency: gui -> logic; logic -> logic | hardware; hardware -> nothing.
bool layer_edge_allowed(Layer from, Layer to);

struct ModuleSpec {
  std::string name;
  Layer layer = Layer::logic;
  std::string kind;
  std::map<std::string, std::string> connectors;
  Json options = Json::object();
  std::optional<std::string> remote_address;
  // Interface name for interfuses and remote proxies ("confocal_scanner",
  // "microwave", "spectrometer").
  std::optional<std::string> implements;

  bool operator==(const ModuleSpec&) const = default;
};

struct Configuration {
  std::vector<ModuleSpec> modules;
  std::vector<std::string> startup;
  std::string log_path = "./labkit.log";
  std::string data_dir = "./data";
  std::uint64_t seed = 0;

  const ModuleSpec* find(std::string_view name) const;

  bool operator==(const Configuration&) const = default;
};

struct Violation {
  std::string rule;
  std::string module;
  std::string message;

  bool operator==(const Violation&) const = default;
};

bool is_valid_module_name(std::string_view name);
bool is_known_interface(std::string_view name);

// Throws SyntaxError (with line/column) or Error{Schema} naming the field.
Configuration parse_config(std::string_view text);
Configuration load_config(const std::filesystem::path& path);

// Violations sorted by (rule, module, message); empty iff the configuration
// is structurally legal.
std::vector<Violation> validate(const Configuration& cfg);

// Canonical form: sorted keys, two-space indent, UTF-8 passthrough.
std::string serialize_config(const Configuration& cfg);

}  // namespace labkit
