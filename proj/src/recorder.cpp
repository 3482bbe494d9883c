#include "labkit/recorder.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "labkit/error.hpp"
#include "labkit/events.hpp"

namespace labkit {

namespace fs = std::filesystem;

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_number(std::string_view text) {
  if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (text == "inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  // strtod rather than from_chars: libstdc++ reports subnormals as out of range.
  const std::string owned(text);
  char* end = nullptr;
  const double v = std::strtod(owned.c_str(), &end);
  if (owned.empty() || end != owned.c_str() + owned.size())
    fail(ErrorKind::Io, "not a number: '" + owned + "'");
  return v;
}

const std::array<std::array<std::uint8_t, 3>, 256>& viridis() {
  static const std::array<std::array<std::uint8_t, 3>, 256> table{{
#include "viridis.inc"
  }};
  return table;
}

namespace {

std::string escape_value(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\n')
      out += "\\n";
    else if (c == '\r')
      out += "\\r";
    else
      out += c;
  }
  return out;
}

std::string header_value(const nlohmann::json& v) {
  if (v.is_string()) return escape_value(v.get<std::string>());
  if (v.is_number_float()) return format_number(v.get<double>());
  if (v.is_number()) return v.dump();
  return escape_value(v.dump());
}

void check_tag(const std::string& tag) {
  static const std::regex pattern("[A-Za-z0-9_-]+");
  require(std::regex_match(tag, pattern), "tag must match [A-Za-z0-9_-]+, got '" + tag + "'");
}

void check_key(const std::string& key) {
  static const std::regex pattern("[A-Za-z0-9_.-]+");
  require(std::regex_match(key, pattern), "metadata key must match [A-Za-z0-9_.-]+, got '" + key + "'");
}

std::string hex_color(const std::array<std::uint8_t, 3>& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

DataFile load_data(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  DataFile out;
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;
  bool have_columns = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("# columns:", 0) == 0) {
      std::string rest = line.substr(10);
      if (!rest.empty() && rest[0] == ' ') rest.erase(0, 1);
      if (!rest.empty()) names = split(rest, '\t');
      values.resize(names.size());
      have_columns = true;
    } else if (line.rfind("# ", 0) == 0) {
      const auto colon = line.find(": ", 2);
      if (colon == std::string::npos) fail(ErrorKind::Io, "malformed header line: " + line);
      out.header[line.substr(2, colon - 2)] = line.substr(colon + 2);
    } else if (!line.empty()) {
      if (!have_columns) fail(ErrorKind::Io, "data row before the columns line");
      const auto cells = split(line, '\t');
      if (cells.size() != names.size()) fail(ErrorKind::Io, "row width does not match the columns line");
      for (std::size_t k = 0; k < cells.size(); ++k) values[k].push_back(parse_number(cells[k]));
    }
  }
  for (std::size_t k = 0; k < names.size(); ++k)
    out.columns.emplace_back(names[k], Eigen::Map<Eigen::VectorXd>(values[k].data(),
                                                                    static_cast<Eigen::Index>(values[k].size())));
  return out;
}

ScanImage load_image(const fs::path& path) {
  const DataFile file = load_data(path);
  auto get = [&](const std::string& key) {
    const auto it = file.header.find(key);
    if (it == file.header.end()) fail(ErrorKind::Io, "image file lacks '" + key + "'");
    return it->second;
  };
  ScanImage image;
  auto& s = image.settings;
  s.plane = get("plane") == "xz" ? ScanPlane::xz : ScanPlane::xy;
  s.center = {parse_number(get("center_x")), parse_number(get("center_y")), parse_number(get("center_z"))};
  s.width = parse_number(get("width"));
  s.height = parse_number(get("height"));
  s.nx = std::stoi(get("nx"));
  s.ny = std::stoi(get("ny"));
  s.dwell_s = parse_number(get("dwell_s"));
  image.rows_complete = std::stoi(get("rows_complete"));
  image.scan_id = std::stoull(get("scan_id"));
  if (static_cast<int>(file.columns.size()) != s.nx) fail(ErrorKind::Io, "column count differs from nx");
  image.data.resize(s.ny, s.nx);
  for (int j = 0; j < s.nx; ++j) {
    const auto& col = file.columns[static_cast<std::size_t>(j)].second;
    if (col.size() != s.ny) fail(ErrorKind::Io, "row count differs from ny");
    image.data.col(j) = col;
  }
  return image;
}

std::string render_heatmap_svg(const ScanImage& image) {
  const auto& s = image.settings;
  const int nx = static_cast<int>(image.data.cols());
  const int ny = static_cast<int>(image.data.rows());
  const double plot_w = 400.0;
  const double plot_h = std::clamp(plot_w * s.height / s.width, 40.0, 800.0);
  const double left = 70, top = 40, right = 130, bottom = 60;
  const double cw = plot_w / nx, ch = plot_h / ny;

  double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin;
  for (Eigen::Index k = 0; k < image.data.size(); ++k) {
    const double v = image.data.data()[k];
    if (std::isfinite(v)) {
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
  }
  const bool any = std::isfinite(vmin);
  auto color_of = [&](double v) {
    if (!std::isfinite(v)) return std::string(kGapColor);
    const double t = vmax > vmin ? (v - vmin) / (vmax - vmin) : 0.0;
    const auto idx = static_cast<std::size_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
    return hex_color(viridis()[idx]);
  };

  const auto [x0, x1] = s.x_range();
  const auto [r0, r1] = s.row_range();
  const char* row_axis = s.plane == ScanPlane::xy ? "y" : "z";
  const double width = left + plot_w + right, height = top + plot_h + bottom;

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt("%.0f", width) << "\" height=\""
    << fmt("%.0f", height) << "\" viewBox=\"0 0 " << fmt("%.0f", width) << ' ' << fmt("%.0f", height)
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<defs><linearGradient id=\"cbar\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">";
  for (int k = 0; k <= 16; ++k) {
    const int idx = std::min(k * 16, 255);
    o << "<stop offset=\"" << fmt("%.4f", idx / 255.0) << "\" stop-color=\"" << hex_color(viridis()[idx])
      << "\"/>";
  }
  o << "</linearGradient></defs>\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << fmt("%.1f", left + plot_w / 2) << "\" y=\"20\" text-anchor=\"middle\">"
    << to_string(s.plane) << " scan " << image.scan_id << " (" << image.rows_complete << '/' << ny
    << " rows)</text>\n";
  o << "<g shape-rendering=\"crispEdges\">\n";
  for (int i = 0; i < ny; ++i) {
    for (int j = 0; j < nx; ++j) {
      o << "<rect class=\"cell\" x=\"" << fmt("%.3f", left + j * cw) << "\" y=\""
        << fmt("%.3f", top + (ny - 1 - i) * ch) << "\" width=\"" << fmt("%.3f", cw) << "\" height=\""
        << fmt("%.3f", ch) << "\" fill=\"" << color_of(image.data(i, j)) << "\"/>\n";
    }
  }
  o << "</g>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << fmt("%.3f", plot_w) << "\" height=\""
    << fmt("%.3f", plot_h) << "\" fill=\"none\" stroke=\"black\"/>\n";

  // Ticks at both ends and the centre of each axis.
  for (int k = 0; k <= 2; ++k) {
    const double f = k / 2.0;
    const double xv = std::lerp(x0, x1, f), rv = std::lerp(r0, r1, f);
    const double px = left + f * plot_w, py = top + plot_h - f * plot_h;
    o << "<text x=\"" << fmt("%.1f", px) << "\" y=\"" << fmt("%.1f", top + plot_h + 16)
      << "\" text-anchor=\"middle\">" << fmt("%.4g", xv) << "</text>\n";
    o << "<text x=\"" << fmt("%.1f", left - 6) << "\" y=\"" << fmt("%.1f", py + 4)
      << "\" text-anchor=\"end\">" << fmt("%.4g", rv) << "</text>\n";
  }
  o << "<text x=\"" << fmt("%.1f", left + plot_w / 2) << "\" y=\"" << fmt("%.1f", top + plot_h + 40)
    << "\" text-anchor=\"middle\">x (µm)</text>\n";
  o << "<text transform=\"translate(20," << fmt("%.1f", top + plot_h / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">" << row_axis << " (µm)</text>\n";

  const double bx = left + plot_w + 20;
  o << "<rect class=\"colorbar\" x=\"" << fmt("%.1f", bx) << "\" y=\"" << top << "\" width=\"16\" height=\""
    << fmt("%.3f", plot_h) << "\" fill=\"url(#cbar)\" stroke=\"black\"/>\n";
  o << "<text x=\"" << fmt("%.1f", bx + 20) << "\" y=\"" << fmt("%.1f", top + 10) << "\">"
    << (any ? fmt("%.4g", vmax) : std::string("-")) << "</text>\n";
  o << "<text x=\"" << fmt("%.1f", bx + 20) << "\" y=\"" << fmt("%.1f", top + plot_h) << "\">"
    << (any ? fmt("%.4g", vmin) : std::string("-")) << "</text>\n";
  o << "<text transform=\"translate(" << fmt("%.1f", bx + 95) << "," << fmt("%.1f", top + plot_h / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">counts/s</text>\n";
  o << "</svg>\n";
  return o.str();
}

std::string render_plot_svg(const Eigen::VectorXd& x, const Eigen::VectorXd& y, const PlotLabels& labels,
                            const fit::FitResult* fit) {
  require(x.size() == y.size() && x.size() >= 1, "plot needs equal-length, non-empty x and y");
  const double plot_w = 480, plot_h = 300;
  const double left = 80, top = 40, right = 30, bottom = 60;

  double xmin = x.minCoeff(), xmax = x.maxCoeff();
  if (!(xmax > xmin)) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  std::vector<std::pair<double, double>> curve;
  if (fit) {
    const int samples = 400;
    for (int k = 0; k < samples; ++k) {
      const double xv = std::lerp(x.minCoeff(), x.maxCoeff(), k / double(samples - 1));
      curve.emplace_back(xv, fit::evaluate(*fit, xv));
    }
  }
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (std::isfinite(y[i])) ymin = std::min(ymin, y[i]), ymax = std::max(ymax, y[i]);
  for (const auto& [cx, cy] : curve)
    if (std::isfinite(cy)) ymin = std::min(ymin, cy), ymax = std::max(ymax, cy);
  if (!std::isfinite(ymin)) ymin = 0, ymax = 1;
  if (!(ymax > ymin)) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;

  auto px = [&](double v) { return left + (v - xmin) / (xmax - xmin) * plot_w; };
  auto py = [&](double v) { return top + plot_h - (v - ymin) / (ymax - ymin) * plot_h; };
  const double width = left + plot_w + right, height = top + plot_h + bottom;

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt("%.0f", width) << "\" height=\""
    << fmt("%.0f", height) << "\" viewBox=\"0 0 " << fmt("%.0f", width) << ' ' << fmt("%.0f", height)
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << fmt("%.1f", left + plot_w / 2) << "\" y=\"20\" text-anchor=\"middle\">"
    << xml_escape(labels.title) << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << plot_w << "\" height=\"" << plot_h
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double f = k / 4.0;
    const double xv = std::lerp(xmin, xmax, f), yv = std::lerp(ymin, ymax, f);
    o << "<text x=\"" << fmt("%.1f", px(xv)) << "\" y=\"" << fmt("%.1f", top + plot_h + 16)
      << "\" text-anchor=\"middle\">" << fmt("%.5g", xv) << "</text>\n";
    o << "<text x=\"" << fmt("%.1f", left - 6) << "\" y=\"" << fmt("%.1f", py(yv) + 4)
      << "\" text-anchor=\"end\">" << fmt("%.4g", yv) << "</text>\n";
  }
  o << "<text x=\"" << fmt("%.1f", left + plot_w / 2) << "\" y=\"" << fmt("%.1f", top + plot_h + 40)
    << "\" text-anchor=\"middle\">" << xml_escape(labels.x) << "</text>\n";
  o << "<text transform=\"translate(18," << fmt("%.1f", top + plot_h / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">" << xml_escape(labels.y) << "</text>\n";

  if (x.size() == 1) {
    o << "<circle class=\"marker\" cx=\"" << fmt("%.2f", px(x[0])) << "\" cy=\"" << fmt("%.2f", py(y[0]))
      << "\" r=\"3\" fill=\"#1f4e79\"/>\n";
  } else {
    o << "<polyline class=\"data\" fill=\"none\" stroke=\"#1f4e79\" stroke-width=\"1.2\" points=\"";
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (!std::isfinite(y[i])) continue;
      o << (i ? " " : "") << fmt("%.2f", px(x[i])) << ',' << fmt("%.2f", py(y[i]));
    }
    o << "\"/>\n";
  }
  if (fit) {
    o << "<polyline class=\"fit\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"1.2\" points=\"";
    bool first = true;
    for (const auto& [cx, cy] : curve) {
      if (!std::isfinite(cy)) continue;
      o << (first ? "" : " ") << fmt("%.2f", px(cx)) << ',' << fmt("%.2f", py(cy));
      first = false;
    }
    o << "\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

Recorder::Recorder(fs::path data_dir, Clock clock, std::uint64_t seed, EventBus* events)
    : data_dir_(std::move(data_dir)), clock_(std::move(clock)), seed_(seed), events_(events) {}

fs::path Recorder::reserve_locked(const std::string& tag, const char* extension) {
  check_tag(tag);
  const std::string stamp = format_compact(clock_());
  const fs::path dir = data_dir_ / stamp.substr(0, 4) / stamp.substr(4, 2);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
  const std::string base = stamp + "_" + tag;
  for (int n = 0; n < 1'000'000; ++n) {
    const std::string stem = n == 0 ? base : base + "-" + std::to_string(n);
    if (fs::exists(dir / (stem + ".dat")) || fs::exists(dir / (stem + ".svg"))) continue;
    const fs::path path = dir / (stem + extension);
    if (std::FILE* f = std::fopen(path.c_str(), "wx")) {
      std::fclose(f);
      return path;
    }
    if (errno != EEXIST) fail(ErrorKind::Io, "cannot create " + path.string());
  }
  fail(ErrorKind::Io, "no free file name for tag '" + tag + "'");
}

void Recorder::write_text_locked(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.close();
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
}

void Recorder::write_data_locked(const fs::path& path, const Metadata& metadata, const Columns& columns) {
  Metadata header = metadata;
  header["timestamp"] = format_iso8601_ms(clock_());
  header["software"] = kSoftwareVersion;
  header["seed"] = seed_;

  std::string text;
  for (const auto& [key, value] : header) {
    check_key(key);
    text += "# " + key + ": " + header_value(value) + "\n";
  }
  text += "# columns:";
  for (std::size_t k = 0; k < columns.size(); ++k) text += (k ? "\t" : " ") + columns[k].first;
  text += "\n";
  const Eigen::Index rows = columns.empty() ? 0 : columns.front().second.size();
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < columns.size(); ++k) {
      if (k) text += '\t';
      text += format_number(columns[k].second[i]);
    }
    text += '\n';
  }
  write_text_locked(path, text);
}

void Recorder::announce(const std::string& kind, const std::vector<fs::path>& paths) {
  if (!events_) return;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : paths) list.push_back(p.string());
  events_->publish("recorder.saved", {{"kind", kind}, {"paths", list}});
}

namespace {

void check_columns(const Columns& columns) {
  for (const auto& [name, values] : columns) {
    require(!name.empty() && name.find_first_of("\t\n\r") == std::string::npos,
            "column names must be non-empty and free of tabs and newlines");
    require(values.size() == columns.front().second.size(), "all columns must have equal length");
  }
}

}  // namespace

fs::path Recorder::save_data(const std::string& tag, const Metadata& metadata, const Columns& columns) {
  check_columns(columns);
  for (const auto& [key, value] : metadata) check_key(key);
  fs::path path;
  {
    std::lock_guard lock(mutex_);
    path = reserve_locked(tag, ".dat");
    write_data_locked(path, metadata, columns);
  }
  announce("data", {path});
  return path;
}

std::pair<fs::path, fs::path> Recorder::save_image(const std::string& tag, const ScanImage& image,
                                                   const Metadata& extra) {
  require(image.rows_complete >= 1, "image has no completed rows");
  const auto& s = image.settings;
  Metadata meta = extra;
  const auto [x0, x1] = s.x_range();
  const auto [r0, r1] = s.row_range();
  meta["kind"] = "scan_image";
  meta["plane"] = std::string(to_string(s.plane));
  meta["center_x"] = s.center.x;
  meta["center_y"] = s.center.y;
  meta["center_z"] = s.center.z;
  meta["width"] = s.width;
  meta["height"] = s.height;
  meta["nx"] = s.nx;
  meta["ny"] = s.ny;
  meta["dwell_s"] = s.dwell_s;
  meta["rows_complete"] = image.rows_complete;
  meta["scan_id"] = image.scan_id;
  meta["x_axis"] = "x";
  meta["row_axis"] = s.plane == ScanPlane::xy ? "y" : "z";
  meta["x_min"] = x0;
  meta["x_max"] = x1;
  meta["row_min"] = r0;
  meta["row_max"] = r1;
  meta["unit"] = "counts/s";
  meta["layout"] = "row-major, row 0 at row_min, column pxj at pixel j";

  Columns columns;
  for (Eigen::Index j = 0; j < image.data.cols(); ++j)
    columns.emplace_back("px" + std::to_string(j), image.data.col(j));

  fs::path data, svg;
  {
    std::lock_guard lock(mutex_);
    data = reserve_locked(tag, ".dat");
    write_data_locked(data, meta, columns);
    svg = fs::path(data).replace_extension(".svg");
    write_text_locked(svg, render_heatmap_svg(image));
  }
  announce("image", {data, svg});
  return {data, svg};
}

fs::path Recorder::save_plot(const std::string& tag, const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                             const PlotLabels& labels, const fit::FitResult* fit) {
  const std::string svg_text = render_plot_svg(x, y, labels, fit);
  fs::path path;
  {
    std::lock_guard lock(mutex_);
    path = reserve_locked(tag, ".svg");
    write_text_locked(path, svg_text);
  }
  announce("plot", {path});
  return path;
}

fs::path Recorder::save_plot_beside(const fs::path& data_path, const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                                    const PlotLabels& labels, const fit::FitResult* fit) {
  const std::string svg_text = render_plot_svg(x, y, labels, fit);
  const fs::path path = fs::path(data_path).replace_extension(".svg");
  {
    std::lock_guard lock(mutex_);
    write_text_locked(path, svg_text);
  }
  announce("plot", {path});
  return path;
}

}  // namespace labkit
