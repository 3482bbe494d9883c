#include "labkit/cli.hpp"

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "labkit/kernel.hpp"
#include "labkit/recorder.hpp"
#include "labkit/remote.hpp"

namespace labkit {

namespace {

enum Exit { kOk = 0, kConfig = 1, kRuntime = 2, kNetwork = 3 };

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Syntax:
    case ErrorKind::Schema:
    case ErrorKind::UnknownModule:
    case ErrorKind::Forbidden:
      return kConfig;
    case ErrorKind::Bind:
    case ErrorKind::Connect:
    case ErrorKind::ConnectionLost:
    case ErrorKind::Timeout:
    case ErrorKind::Protocol:
      return kNetwork;
    default:
      return kRuntime;
  }
}

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data_dir;
  std::optional<std::string> log_path;
  std::optional<std::string> fixed_time;
};

Configuration load(const Globals& g) {
  if (g.config.empty()) fail(ErrorKind::Schema, "--config is required");
  Configuration cfg;
  try {
    cfg = load_config(g.config);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Io) throw;
    fail(ErrorKind::Schema, e.what());
  }
  if (g.seed) cfg.seed = *g.seed;
  if (g.data_dir) cfg.data_dir = *g.data_dir;
  if (g.log_path) cfg.log_path = *g.log_path;
  return cfg;
}

KernelOptions kernel_options(const Globals& g) {
  KernelOptions o;
  if (g.fixed_time) o.clock = fixed_clock(parse_iso8601(*g.fixed_time));
  return o;
}

std::string module_of_kind(const Configuration& cfg, const std::string& given, const std::string& kind) {
  if (!given.empty()) {
    if (!cfg.find(given)) fail(ErrorKind::UnknownModule, "no module named '" + given + "' in the configuration");
    return given;
  }
  for (const auto& m : cfg.modules)
    if (m.kind == kind) return m.name;
  fail(ErrorKind::Schema, "the configuration declares no " + kind + " module");
}

std::vector<double> split_numbers(const std::string& text, std::size_t n, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) fail(ErrorKind::Schema, what + ": '" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.size() != n) fail(ErrorKind::Schema, what + " needs " + std::to_string(n) + " comma-separated values");
  return out;
}

std::vector<Position3> read_spots(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Schema, "cannot read spots file " + path);
  std::vector<Position3> spots;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    Position3 p;
    if (!(ls >> p.x)) continue;  // blank line
    std::string rest;
    if (!(ls >> p.y >> p.z) || (ls >> rest))
      fail(ErrorKind::Schema, path + ":" + std::to_string(number) + ": expected 'x y z'");
    spots.push_back(p);
  }
  return spots;
}

// Raises the recorded error of a finished measurement, if any.
void check_finished(const Json& status) {
  const Json& err = status.at("last_error");
  if (err.is_null()) return;
  if (err.is_string()) fail(ErrorKind::Internal, err.get<std::string>());
  fail(ErrorKind::Internal, err.value("message", std::string("measurement failed")));
}

std::string fit_summary(const Json& fit) {
  std::ostringstream s;
  s << "fit " << fit.at("model").get<std::string>() << ":";
  for (const auto& [name, value] : fit.at("params").items()) s << " " << name << "=" << format_number(value.get<double>());
  s << " converged=" << (fit.at("converged").get<bool>() ? "yes" : "no");
  return s.str();
}

int run_validate(const Globals& g, std::ostream& out) {
  const Configuration cfg = load(g);
  const auto violations = validate(cfg);
  for (const auto& v : violations) out << v.rule << " " << v.module << ": " << v.message << "\n";
  if (!violations.empty()) return kConfig;
  out << "ok: " << cfg.modules.size() << " modules\n";
  return kOk;
}

struct ScanArgs {
  std::string plane = "xy";
  std::string center = "0,0,0";
  std::string extent = "20,20";
  std::string res = "50,50";
  double dwell = 1e-3;
  std::string tag = "scan";
  std::string module;
};

int run_scan(const Globals& g, const ScanArgs& a, std::ostream& out) {
  const Configuration cfg = load(g);
  const std::string name = module_of_kind(cfg, a.module, "confocal_logic");
  const auto c = split_numbers(a.center, 3, "--center");
  const auto e = split_numbers(a.extent, 2, "--extent");
  const auto r = split_numbers(a.res, 2, "--res");
  Json settings{{"plane", a.plane},
                {"center", {c[0], c[1], c[2]}},
                {"extent", {e[0], e[1]}},
                {"resolution", {static_cast<int>(r[0]), static_cast<int>(r[1])}},
                {"dwell_s", a.dwell}};

  Kernel kernel(cfg, kernel_options(g));
  kernel.activate(name);
  kernel.dispatch(name, "start_scan", settings);
  kernel.wait_idle(name);
  check_finished(kernel.dispatch(name, "get_status"));
  const Json saved = kernel.dispatch(name, "save_image", {{"tag", a.tag}});
  const Json image = kernel.dispatch(name, "get_image");
  kernel.shutdown();

  out << saved.at("data").get<std::string>() << "\n" << saved.at("svg").get<std::string>() << "\n";
  double best = -1;
  for (const auto& row : image.at("data"))
    for (const auto& v : row)
      if (v.is_number()) best = std::max(best, v.get<double>());
  out << "scan " << a.plane << " " << static_cast<int>(r[0]) << "x" << static_cast<int>(r[1])
      << ": max " << format_number(best) << " counts/s\n";
  return kOk;
}

struct SweepArgs {
  double start = 2.77e9;
  double stop = 2.97e9;
  int points = 101;
  int sweeps = 10;
  double power = -20;
  double dwell = 2e-3;
};

Json sweep_json(const SweepArgs& s) {
  return {{"f_start", s.start}, {"f_stop", s.stop},   {"n_points", s.points},
          {"n_sweeps", s.sweeps}, {"power", s.power}, {"dwell_s", s.dwell}};
}

int run_odmr(const Globals& g, const SweepArgs& s, const std::string& tag, const std::string& module,
             std::ostream& out, std::ostream& err) {
  const Configuration cfg = load(g);
  const std::string name = module_of_kind(cfg, module, "odmr_logic");
  Kernel kernel(cfg, kernel_options(g));
  kernel.activate(name);
  kernel.dispatch(name, "start_sweep", sweep_json(s));
  kernel.wait_idle(name);
  check_finished(kernel.dispatch(name, "get_status"));
  std::optional<Json> fit;
  std::string fit_error;
  try {
    fit = kernel.dispatch(name, "fit_resonance");
  } catch (const Error& e) {
    fit_error = e.what();
  }
  const Json saved = kernel.dispatch(name, "save", {{"tag", tag}});
  kernel.shutdown();

  out << saved.at("data").get<std::string>() << "\n" << saved.at("svg").get<std::string>() << "\n";
  if (!fit) {
    err << "fit failed: " << fit_error << "\n";
    return kRuntime;
  }
  out << fit_summary(*fit) << "\n";
  return kOk;
}

int run_multispot(const Globals& g, const SweepArgs& s, const std::string& spots_file, const std::string& tag,
                  const std::string& module, std::ostream& out) {
  const Configuration cfg = load(g);
  const std::string name = module_of_kind(cfg, module, "multispot_task");
  const auto spots = read_spots(spots_file);
  Kernel kernel(cfg, kernel_options(g));
  kernel.activate(name);
  const Json result =
      kernel.dispatch(name, "run_multispot", {{"spots", spots}, {"sweep", sweep_json(s)}, {"tag", tag}});
  kernel.shutdown();

  int accepted = 0;
  for (const auto& r : result) {
    out << "spot " << r.at("spot_index").get<int>() << ": ";
    if (r.contains("error")) {
      out << "failed (" << r.at("error").get<std::string>() << ")\n";
    } else if (!r.at("accepted").get<bool>()) {
      out << "rejected (" << r.at("optimizer").value("reason", std::string()) << ")\n";
    } else {
      ++accepted;
      out << r.at("data_path").get<std::string>() << " " << r.at("svg_path").get<std::string>() << "\n  "
          << fit_summary(r.at("fit")) << "\n";
    }
  }
  out << accepted << " of " << result.size() << " spots measured\n";
  return kOk;
}

int run_serve(const Globals& g, const std::string& listen, bool allow_remote, std::ostream& out) {
  const Configuration cfg = load(g);
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);  // inherited by every thread started below

  Kernel kernel(cfg, kernel_options(g));
  kernel.start();
  remote::ServerOptions opts;
  opts.listen = remote::parse_endpoint(listen);
  opts.allow_remote = allow_remote;
  remote::Server server(kernel, opts);
  out << "listening on " << server.host() << ":" << server.port() << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  out << "shutting down" << std::endl;
  server.stop();
  kernel.shutdown();
  return kOk;
}

int run_call(const std::string& connect, const std::string& target, const std::string& op,
             const std::string& params, double timeout_s, std::ostream& out) {
  Json p = Json::object();
  if (!params.empty()) {
    try {
      p = Json::parse(params);
    } catch (const Json::parse_error& e) {
      fail(ErrorKind::Schema, std::string("params are not valid JSON: ") + e.what());
    }
  }
  remote::Client client(remote::parse_endpoint(connect),
                        {std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000))});
  out << client.call(target, op, p).dump() << "\n";
  return kOk;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"labkit: modular experiment control with simulated instruments", "labkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "configuration file (JSON)");
  app.add_option("--seed", g.seed, "override the configuration seed");
  app.add_option("--data-dir", g.data_dir, "override the configuration data_dir");
  app.add_option("--log-path", g.log_path, "override the configuration log_path");
  app.add_option("--fixed-time", g.fixed_time,
                 "pin the clock (YYYY-MM-DDTHH:MM:SS.fffZ) for byte-reproducible output");

  app.add_subcommand("validate", "check a configuration and print its violations");

  auto* serve = app.add_subcommand("serve", "activate startup modules and serve the protocol");
  std::string listen = "127.0.0.1:7300";
  bool allow_remote = false;
  serve->add_option("--listen", listen, "host:port");
  serve->add_flag("--allow-remote", allow_remote, "permit a non-loopback listen address");

  auto* scan = app.add_subcommand("scan", "acquire and save one confocal image");
  ScanArgs sa;
  scan->add_option("--plane", sa.plane)->check(CLI::IsMember({"xy", "xz"}));
  scan->add_option("--center", sa.center, "x,y,z in µm");
  scan->add_option("--extent", sa.extent, "w,h in µm");
  scan->add_option("--res", sa.res, "nx,ny");
  scan->add_option("--dwell", sa.dwell, "seconds per pixel");
  scan->add_option("--out", sa.tag, "file tag");
  scan->add_option("--module", sa.module, "confocal logic module");

  SweepArgs sw;
  std::string odmr_tag = "odmr", odmr_module;
  auto* odmr = app.add_subcommand("odmr", "run an ODMR measurement at the current focus");
  odmr->add_option("--start", sw.start, "Hz");
  odmr->add_option("--stop", sw.stop, "Hz");
  odmr->add_option("--points", sw.points);
  odmr->add_option("--sweeps", sw.sweeps);
  odmr->add_option("--power", sw.power, "dBm");
  odmr->add_option("--dwell", sw.dwell, "seconds per point");
  odmr->add_option("--out", odmr_tag, "file tag");
  odmr->add_option("--module", odmr_module, "ODMR logic module");

  std::string spots_file, multi_tag = "multispot", multi_module;
  auto* multi = app.add_subcommand("multispot", "optimize and run ODMR at every spot of a list");
  multi->add_option("--spots", spots_file, "text file, one 'x y z' per line (µm)")->required();
  multi->add_option("--start", sw.start, "Hz");
  multi->add_option("--stop", sw.stop, "Hz");
  multi->add_option("--points", sw.points);
  multi->add_option("--sweeps", sw.sweeps);
  multi->add_option("--power", sw.power, "dBm");
  multi->add_option("--dwell", sw.dwell, "seconds per point");
  multi->add_option("--out", multi_tag, "file tag prefix");
  multi->add_option("--module", multi_module, "task module");

  std::string connect = "127.0.0.1:7300", target, op, params;
  double timeout_s = 30;
  auto* call = app.add_subcommand("call", "send one request to a running server");
  call->add_option("--connect", connect, "host:port");
  call->add_option("--timeout", timeout_s, "seconds");
  call->add_option("target", target)->required();
  call->add_option("op", op)->required();
  call->add_option("params", params, "JSON object");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kConfig;
  }

  try {
    if (app.got_subcommand("validate")) return run_validate(g, out);
    if (app.got_subcommand(serve)) return run_serve(g, listen, allow_remote, out);
    if (app.got_subcommand(scan)) return run_scan(g, sa, out);
    if (app.got_subcommand(odmr)) return run_odmr(g, sw, odmr_tag, odmr_module, out, err);
    if (app.got_subcommand(multi)) return run_multispot(g, sw, spots_file, multi_tag, multi_module, out);
    if (app.got_subcommand(call)) return run_call(connect, target, op, params, timeout_s, out);
  } catch (const ActivationFailed& e) {
    err << "error: " << e.what() << "\n";
    return e.cause() == ErrorKind::Connect ? kNetwork : exit_code(e.cause());
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kConfig;
}

}  // namespace labkit
