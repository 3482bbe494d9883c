#include "labkit/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "labkit/error.hpp"

namespace labkit {

std::string_view to_string(Layer layer) {
  switch (layer) {
    case Layer::hardware: return "hardware";
    case Layer::logic: return "logic";
    case Layer::gui: return "gui";
  }
  return "logic";
}

std::optional<Layer> parse_layer(std::string_view text) {
  if (text == "hardware") return Layer::hardware;
  if (text == "logic") return Layer::logic;
  if (text == "gui") return Layer::gui;
  return std::nullopt;
}

bool layer_edge_allowed(Layer from, Layer to) {
  //                                  to: hardware logic  gui
  static constexpr bool kAllowed[3][3] = {{false, false, false},   // from hardware
                                          {true, true, false},     // from logic
                                          {false, true, false}};   // from gui
  return kAllowed[static_cast<int>(from)][static_cast<int>(to)];
}

const ModuleSpec* Configuration::find(std::string_view name) const {
  for (const auto& m : modules)
    if (m.name == name) return &m;
  return nullptr;
}

bool is_valid_module_name(std::string_view name) {
  if (name.empty()) return false;
  auto head = [](char c) { return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || c == '_'; };
  auto tail = [&](char c) { return head(c) || (c >= '0' && c <= '9'); };
  if (!head(name.front())) return false;
  return std::all_of(name.begin() + 1, name.end(), tail);
}

bool is_known_interface(std::string_view name) {
  return name == "confocal_scanner" || name == "microwave" || name == "spectrometer";
}

namespace {

[[noreturn]] void schema_error(const std::string& where, const std::string& what) {
  fail(ErrorKind::Schema, where + ": " + what);
}

std::pair<std::size_t, std::size_t> line_column(std::string_view text, std::size_t byte) {
  std::size_t line = 1, column = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return {line, column};
}

void reject_unknown_keys(const Json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key)) schema_error(where, "unknown field '" + key + "'");
}

std::string require_string(const Json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) schema_error(where, std::string("missing field '") + key + "'");
  if (!it->is_string()) schema_error(where, std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

ModuleSpec parse_module(const Json& obj, std::size_t index) {
  std::string where = "modules[" + std::to_string(index) + "]";
  if (!obj.is_object()) schema_error(where, "module entry must be an object");
  if (auto it = obj.find("name"); it != obj.end() && it->is_string())
    where = "module '" + it->get<std::string>() + "'";
  reject_unknown_keys(obj, {"name", "layer", "kind", "connectors", "options", "remote_address",
                            "implements"},
                      where);

  ModuleSpec spec;
  spec.name = require_string(obj, "name", where);
  if (!is_valid_module_name(spec.name))
    schema_error(where, "name must match [A-Za-z_][A-Za-z0-9_]*");
  if (spec.name == "kernel") schema_error(where, "name 'kernel' is reserved");

  const std::string layer = require_string(obj, "layer", where);
  auto parsed = parse_layer(layer);
  if (!parsed) schema_error(where, "field 'layer' must be one of hardware, logic, gui");
  spec.layer = *parsed;
  spec.kind = require_string(obj, "kind", where);
  if (spec.kind.empty()) schema_error(where, "field 'kind' must not be empty");

  if (auto it = obj.find("connectors"); it != obj.end()) {
    if (!it->is_object()) schema_error(where, "field 'connectors' must be an object");
    for (const auto& [key, target] : it->items()) {
      if (!target.is_string())
        schema_error(where, "connector '" + key + "' must name a module (string)");
      spec.connectors.emplace(key, target.get<std::string>());
    }
  }
  if (auto it = obj.find("options"); it != obj.end()) {
    if (!it->is_object()) schema_error(where, "field 'options' must be an object");
    spec.options = *it;
  }
  if (auto it = obj.find("remote_address"); it != obj.end()) {
    if (!it->is_string()) schema_error(where, "field 'remote_address' must be a string");
    spec.remote_address = it->get<std::string>();
  }
  if (auto it = obj.find("implements"); it != obj.end()) {
    if (!it->is_string() || !is_known_interface(it->get<std::string>()))
      schema_error(where,
                   "field 'implements' must be one of confocal_scanner, microwave, spectrometer");
    spec.implements = it->get<std::string>();
  }
  return spec;
}

}  // namespace

Configuration parse_config(std::string_view text) {
  Json doc;
  try {
    doc = Json::parse(text.begin(), text.end());
  } catch (const Json::parse_error& e) {
    auto [line, column] = line_column(text, e.byte > 0 ? e.byte - 1 : 0);
    throw SyntaxError(line, column, e.what());
  }
  if (!doc.is_object()) schema_error("document", "top level must be an object");
  reject_unknown_keys(doc, {"modules", "startup", "log_path", "data_dir", "seed"}, "document");

  Configuration cfg;
  auto modules = doc.find("modules");
  if (modules == doc.end()) schema_error("document", "missing field 'modules'");
  if (!modules->is_array()) schema_error("document", "field 'modules' must be an array");
  for (std::size_t i = 0; i < modules->size(); ++i)
    cfg.modules.push_back(parse_module((*modules)[i], i));

  if (auto it = doc.find("startup"); it != doc.end()) {
    if (!it->is_array()) schema_error("document", "field 'startup' must be an array");
    for (const auto& entry : *it) {
      if (!entry.is_string()) schema_error("startup", "entries must be module names");
      cfg.startup.push_back(entry.get<std::string>());
    }
  }
  if (auto it = doc.find("log_path"); it != doc.end()) {
    if (!it->is_string()) schema_error("document", "field 'log_path' must be a string");
    cfg.log_path = it->get<std::string>();
  }
  if (auto it = doc.find("data_dir"); it != doc.end()) {
    if (!it->is_string()) schema_error("document", "field 'data_dir' must be a string");
    cfg.data_dir = it->get<std::string>();
  }
  if (auto it = doc.find("seed"); it != doc.end()) {
    if (it->is_number_unsigned())
      cfg.seed = it->get<std::uint64_t>();
    else if (it->is_number_integer() && it->get<std::int64_t>() >= 0)
      cfg.seed = static_cast<std::uint64_t>(it->get<std::int64_t>());
    else
      schema_error("document", "field 'seed' must be an integer >= 0");
  }
  return cfg;
}

Configuration load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read configuration file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

namespace {

// Modules that lie on a directed cycle: members of non-trivial strongly
// connected components, plus self-loops.
std::set<std::string> modules_on_cycles(const std::map<std::string, std::vector<std::string>>& graph) {
  std::map<std::string, int> index, low;
  std::set<std::string> on_stack;
  std::vector<std::string> stack;
  std::set<std::string> result;
  int counter = 0;

  std::function<void(const std::string&)> strongconnect = [&](const std::string& v) {
    index[v] = low[v] = counter++;
    stack.push_back(v);
    on_stack.insert(v);
    for (const auto& w : graph.at(v)) {
      if (!index.count(w)) {
        strongconnect(w);
        low[v] = std::min(low[v], low[w]);
      } else if (on_stack.count(w)) {
        low[v] = std::min(low[v], index[w]);
      }
    }
    if (low[v] == index[v]) {
      std::vector<std::string> component;
      std::string w;
      do {
        w = stack.back();
        stack.pop_back();
        on_stack.erase(w);
        component.push_back(w);
      } while (w != v);
      const auto& edges = graph.at(v);
      const bool self_loop = std::find(edges.begin(), edges.end(), v) != edges.end();
      if (component.size() > 1 || self_loop) result.insert(component.begin(), component.end());
    }
  };

  for (const auto& [v, _] : graph)
    if (!index.count(v)) strongconnect(v);
  return result;
}

}  // namespace

std::vector<Violation> validate(const Configuration& cfg) {
  std::vector<Violation> out;
  std::map<std::string, const ModuleSpec*> by_name;
  for (const auto& m : cfg.modules) {
    if (!by_name.emplace(m.name, &m).second)
      out.push_back({"DUP_NAME", m.name, "module name declared more than once"});
  }

  for (const auto& s : cfg.startup)
    if (!by_name.count(s))
      out.push_back({"DANGLING_TARGET", s, "startup entry names an undeclared module"});

  std::map<std::string, std::vector<std::string>> graph;
  for (const auto& [name, _] : by_name) graph[name];

  for (const auto& [name, spec] : by_name) {
    if (spec->remote_address && !spec->connectors.empty())
      out.push_back({"REMOTE_HAS_CONNECTOR", name,
                     "remote modules are wired by their owning process"});
    if (spec->layer == Layer::hardware && !spec->connectors.empty())
      out.push_back({"LAYER_HW_HAS_CONNECTOR", name, "hardware modules declare no connectors"});

    for (const auto& [slot, target_name] : spec->connectors) {
      auto target = by_name.find(target_name);
      if (target == by_name.end()) {
        out.push_back({"DANGLING_TARGET", name,
                       "connector '" + slot + "' targets undeclared module '" + target_name + "'"});
        continue;
      }
      graph[name].push_back(target_name);
      const Layer from = spec->layer;
      const Layer to = target->second->layer;
      if (from == Layer::gui && to == Layer::hardware)
        out.push_back({"LAYER_GUI_TO_HW", name,
                       "gui connector '" + slot + "' targets hardware '" + target_name + "'"});
      else if (from == Layer::gui && to == Layer::gui)
        out.push_back({"LAYER_GUI_TO_GUI", name,
                       "gui connector '" + slot + "' targets gui '" + target_name + "'"});
      else if (from == Layer::logic && to == Layer::gui)
        out.push_back({"LAYER_LOGIC_TO_GUI", name,
                       "logic connector '" + slot + "' targets gui '" + target_name + "'"});
    }
  }

  const auto cyclic = modules_on_cycles(graph);
  for (const auto& name : cyclic) {
    std::string members;
    for (const auto& m : cyclic) members += (members.empty() ? "" : ", ") + m;
    out.push_back({"CYCLE", name, "connector graph has a cycle through: " + members});
  }

  std::sort(out.begin(), out.end(), [](const Violation& a, const Violation& b) {
    return std::tie(a.rule, a.module, a.message) < std::tie(b.rule, b.module, b.message);
  });
  return out;
}

std::string serialize_config(const Configuration& cfg) {
  Json doc = Json::object();
  Json modules = Json::array();
  for (const auto& m : cfg.modules) {
    Json obj = Json::object();
    obj["name"] = m.name;
    obj["layer"] = std::string(to_string(m.layer));
    obj["kind"] = m.kind;
    obj["connectors"] = Json::object();
    for (const auto& [slot, target] : m.connectors) obj["connectors"][slot] = target;
    obj["options"] = m.options.is_null() ? Json::object() : m.options;
    if (m.remote_address) obj["remote_address"] = *m.remote_address;
    if (m.implements) obj["implements"] = *m.implements;
    modules.push_back(std::move(obj));
  }
  doc["modules"] = std::move(modules);
  doc["startup"] = cfg.startup;
  doc["log_path"] = cfg.log_path;
  doc["data_dir"] = cfg.data_dir;
  doc["seed"] = cfg.seed;
  return doc.dump(2, ' ', false) + "\n";
}

}  // namespace labkit
