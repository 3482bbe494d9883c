#include "labkit/fitting.hpp"

#include <algorithm>
#include <limits>

#include <Eigen/LU>

#include "labkit/error.hpp"

namespace labkit::fit {

std::string_view to_string(Model model) {
  switch (model) {
    case Model::gauss1d: return "gauss1d";
    case Model::gauss2d: return "gauss2d";
    case Model::lorentz_dip: return "lorentz_dip";
  }
  return "gauss1d";
}

double FitResult::value(std::string_view name) const {
  for (const auto& p : params)
    if (p.name == name) return p.value;
  fail(ErrorKind::Precondition, "fit has no parameter '" + std::string(name) + "'");
}

double FitResult::std_error_of(std::string_view name) const {
  for (const auto& p : params)
    if (p.name == name) return p.std_error;
  fail(ErrorKind::Precondition, "fit has no parameter '" + std::string(name) + "'");
}

bool FitResult::has(std::string_view name) const {
  return std::any_of(params.begin(), params.end(), [&](const Parameter& p) { return p.name == name; });
}

nlohmann::json to_json(const FitResult& fit) {
  nlohmann::json params = nlohmann::json::object();
  nlohmann::json errors = nlohmann::json::object();
  nlohmann::json units = nlohmann::json::object();
  for (const auto& p : fit.params) {
    params[p.name] = p.value;
    errors[p.name] = std::isfinite(p.std_error) ? nlohmann::json(p.std_error) : nlohmann::json();
    units[p.name] = p.unit;
  }
  return {{"model", std::string(to_string(fit.model))},
          {"params", params},
          {"stderr", errors},
          {"units", units},
          {"residual_norm", fit.residual_norm},
          {"converged", fit.converged},
          {"n_iter", fit.n_iter}};
}

double percentile(std::vector<double> values, double q) {
  require(!values.empty(), "percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

namespace {

constexpr double kFwhmPerSigma = 2.3548200450309493;  // 2 sqrt(2 ln 2)

std::vector<double> as_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

void check_finite(const Eigen::VectorXd& v, const char* what) {
  require(v.allFinite(), std::string(what) + " contains non-finite values");
}

void check_not_constant(const Eigen::VectorXd& y) {
  const double span = y.maxCoeff() - y.minCoeff();
  const double scale = y.cwiseAbs().maxCoeff();
  if (!(span > 1e-12 * scale) || span == 0.0)
    fail(ErrorKind::DegenerateData, "data are constant; nothing to fit");
}

void check_1d(const Eigen::VectorXd& x, const Eigen::VectorXd& y, bool ascending_only) {
  require(x.size() == y.size(), "x and y must have equal length");
  if (x.size() < 4) fail(ErrorKind::DegenerateData, "fewer points than parameters");
  require(x.size() >= 5, "at least 5 points are required");
  check_finite(x, "x");
  check_finite(y, "y");
  bool up = true, down = true;
  for (Eigen::Index i = 1; i < x.size(); ++i) {
    up = up && x[i] > x[i - 1];
    down = down && x[i] < x[i - 1];
  }
  require(up || (down && !ascending_only),
          ascending_only ? "x must be strictly ascending" : "x must be strictly monotonic");
  check_not_constant(y);
}

double local_spacing(const Eigen::VectorXd& x, Eigen::Index i) {
  const Eigen::Index n = x.size();
  if (i + 1 < n) return std::abs(x[i + 1] - x[i]);
  return std::abs(x[i] - x[i - 1]);
}

// Contiguous run of indices around `seed` for which `inside(i)` holds.
template <typename Pred>
std::pair<Eigen::Index, Eigen::Index> region_around(Eigen::Index seed, Eigen::Index n, Pred inside) {
  Eigen::Index lo = seed, hi = seed;
  while (lo > 0 && inside(lo - 1)) --lo;
  while (hi + 1 < n && inside(hi + 1)) ++hi;
  return {lo, hi};
}

struct Scale {
  double centre = 0.0;
  double half = 1.0;

  static Scale of(double lo, double hi) {
    Scale s{(lo + hi) / 2.0, (hi - lo) / 2.0};
    if (!(s.half > 0.0)) s.half = 1.0;
    return s;
  }
  double to(double v) const { return (v - centre) / half; }
  double from(double v) const { return v * half + centre; }
};

// Standard errors from the final Jacobian, in normalised units.
Eigen::VectorXd standard_errors(const Eigen::MatrixXd& jac, double ssr) {
  const Eigen::Index n = jac.rows(), p = jac.cols();
  Eigen::VectorXd out = Eigen::VectorXd::Constant(p, std::numeric_limits<double>::quiet_NaN());
  if (n <= p) return out;
  const Eigen::MatrixXd jtj = jac.transpose() * jac;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(jtj);
  if (!lu.isInvertible()) return out;
  const Eigen::MatrixXd cov = lu.inverse() * (ssr / static_cast<double>(n - p));
  for (Eigen::Index k = 0; k < p; ++k) out[k] = std::sqrt(std::max(cov(k, k), 0.0));
  return out;
}

void require_converged(const LmReport<double>& report, const char* model) {
  if (!report.converged)
    fail(ErrorKind::NoConvergence, std::string(model) + " fit did not converge within " +
                                       std::to_string(report.iterations) + " iterations");
}

}  // namespace

Guess initial_guess_gauss1d(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  check_1d(x, y, false);
  const double offset = percentile(as_std(y), 10.0);
  Eigen::Index imax = 0;
  const double peak = y.maxCoeff(&imax);
  const double amplitude = peak - offset;
  if (!(amplitude > 0.0)) fail(ErrorKind::DegenerateData, "no peak above the baseline");
  const double half = offset + amplitude / 2.0;
  auto [lo, hi] = region_around(imax, y.size(), [&](Eigen::Index i) { return y[i] >= half; });
  const double fwhm = std::abs(x[hi] - x[lo]) + local_spacing(x, imax);
  return {{"A", amplitude}, {"x0", (x[lo] + x[hi]) / 2.0}, {"sigma", fwhm / kFwhmPerSigma},
          {"offset", offset}};
}

Guess initial_guess_lorentz_dip(const Eigen::VectorXd& f, const Eigen::VectorXd& y) {
  check_1d(f, y, true);
  const double offset = percentile(as_std(y), 90.0);
  Eigen::Index imin = 0;
  const double bottom = y.minCoeff(&imin);
  const double depth = offset - bottom;
  if (!(offset > 0.0) || !(depth > 0.0)) fail(ErrorKind::DegenerateData, "no dip below the baseline");
  const double half = offset - depth / 2.0;
  auto [lo, hi] = region_around(imin, y.size(), [&](Eigen::Index i) { return y[i] <= half; });
  const double fwhm = std::abs(f[hi] - f[lo]) + local_spacing(f, imin);
  return {{"offset", offset}, {"c", std::clamp(depth / offset, 1e-6, 0.999)},
          {"f0", (f[lo] + f[hi]) / 2.0}, {"fwhm", fwhm}};
}

namespace {

void check_2d(const Eigen::MatrixX2d& xy, const Eigen::VectorXd& z) {
  require(xy.rows() == z.size(), "xy and z must have equal length");
  if (z.size() < 6) fail(ErrorKind::DegenerateData, "fewer points than parameters");
  require(xy.allFinite(), "xy contains non-finite values");
  check_finite(z, "z");
  require(xy.col(0).maxCoeff() > xy.col(0).minCoeff() && xy.col(1).maxCoeff() > xy.col(1).minCoeff(),
          "points must span both axes");
  check_not_constant(z);
}

double min_positive_gap(const Eigen::VectorXd& v) {
  std::vector<double> s = as_std(v);
  std::sort(s.begin(), s.end());
  double gap = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] > s[i - 1]) gap = std::min(gap, s[i] - s[i - 1]);
  return gap;
}

}  // namespace

Guess initial_guess_gauss2d(const Eigen::MatrixX2d& xy, const Eigen::VectorXd& z) {
  check_2d(xy, z);
  const double offset = percentile(as_std(z), 10.0);
  Eigen::Index imax = 0;
  const double peak = z.maxCoeff(&imax);
  const double amplitude = peak - offset;
  if (!(amplitude > 0.0)) fail(ErrorKind::DegenerateData, "no peak above the baseline");
  const double half = offset + amplitude / 2.0;
  double xmin = xy(imax, 0), xmax = xmin, ymin = xy(imax, 1), ymax = ymin;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (z[i] < half) continue;
    xmin = std::min(xmin, xy(i, 0));
    xmax = std::max(xmax, xy(i, 0));
    ymin = std::min(ymin, xy(i, 1));
    ymax = std::max(ymax, xy(i, 1));
  }
  const double px = min_positive_gap(xy.col(0));
  const double py = min_positive_gap(xy.col(1));
  return {{"A", amplitude},
          {"x0", xy(imax, 0)},
          {"y0", xy(imax, 1)},
          {"sigma_x", (xmax - xmin + px) / kFwhmPerSigma},
          {"sigma_y", (ymax - ymin + py) / kFwhmPerSigma},
          {"offset", offset}};
}

FitResult fit_gauss1d(const Eigen::VectorXd& x, const Eigen::VectorXd& y, const Units& units,
                      const LmOptions<double>& options) {
  const Guess g = initial_guess_gauss1d(x, y);
  const Scale sx = Scale::of(x.minCoeff(), x.maxCoeff());
  const double ys = y.cwiseAbs().maxCoeff();
  const Eigen::VectorXd xn = x.unaryExpr([&](double v) { return sx.to(v); });
  const Eigen::VectorXd yn = y / ys;

  Eigen::VectorXd p0(4);
  p0 << g.at("A") / ys, sx.to(g.at("x0")), g.at("sigma") / sx.half, g.at("offset") / ys;
  auto residuals = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd r(xn.size());
    for (Eigen::Index i = 0; i < xn.size(); ++i) r[i] = Gauss1d<double>::value(p, xn[i]) - yn[i];
    return r;
  };
  const auto report = levenberg_marquardt<double>(residuals, p0, options);
  require_converged(report, "gauss1d");
  const Eigen::VectorXd se = standard_errors(report.jacobian, report.ssr);
  const Eigen::VectorXd& p = report.params;

  FitResult out;
  out.model = Model::gauss1d;
  out.params = {{"A", p[0] * ys, se[0] * ys, units.y},
                {"x0", sx.from(p[1]), se[1] * sx.half, units.x},
                {"sigma", std::abs(p[2]) * sx.half, se[2] * sx.half, units.x},
                {"offset", p[3] * ys, se[3] * ys, units.y}};
  Eigen::VectorXd q(4);
  q << out.params[0].value, out.params[1].value, out.params[2].value, out.params[3].value;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    out.residual_norm += std::pow(Gauss1d<double>::value(q, x[i]) - y[i], 2);
  out.converged = true;
  out.n_iter = report.iterations;
  for (double s : report.ssr_trace) out.ssr_trace.push_back(s * ys * ys);
  return out;
}

FitResult fit_gauss2d(const Eigen::MatrixX2d& xy, const Eigen::VectorXd& z, const Units& units,
                      const LmOptions<double>& options) {
  const Guess g = initial_guess_gauss2d(xy, z);
  const Scale sx = Scale::of(xy.col(0).minCoeff(), xy.col(0).maxCoeff());
  const Scale sy = Scale::of(xy.col(1).minCoeff(), xy.col(1).maxCoeff());
  const double zs = z.cwiseAbs().maxCoeff();
  Eigen::MatrixX2d xyn(xy.rows(), 2);
  for (Eigen::Index i = 0; i < xy.rows(); ++i) {
    xyn(i, 0) = sx.to(xy(i, 0));
    xyn(i, 1) = sy.to(xy(i, 1));
  }
  const Eigen::VectorXd zn = z / zs;

  Eigen::VectorXd p0(6);
  p0 << g.at("A") / zs, sx.to(g.at("x0")), sy.to(g.at("y0")), g.at("sigma_x") / sx.half,
      g.at("sigma_y") / sy.half, g.at("offset") / zs;
  auto residuals = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd r(zn.size());
    for (Eigen::Index i = 0; i < zn.size(); ++i)
      r[i] = Gauss2d<double>::value(p, xyn(i, 0), xyn(i, 1)) - zn[i];
    return r;
  };
  const auto report = levenberg_marquardt<double>(residuals, p0, options);
  require_converged(report, "gauss2d");
  const Eigen::VectorXd se = standard_errors(report.jacobian, report.ssr);
  const Eigen::VectorXd& p = report.params;

  FitResult out;
  out.model = Model::gauss2d;
  out.params = {{"A", p[0] * zs, se[0] * zs, units.y},
                {"x0", sx.from(p[1]), se[1] * sx.half, units.x},
                {"y0", sy.from(p[2]), se[2] * sy.half, units.x},
                {"sigma_x", std::abs(p[3]) * sx.half, se[3] * sx.half, units.x},
                {"sigma_y", std::abs(p[4]) * sy.half, se[4] * sy.half, units.x},
                {"offset", p[5] * zs, se[5] * zs, units.y}};
  Eigen::VectorXd q(6);
  for (int k = 0; k < 6; ++k) q[k] = out.params[static_cast<std::size_t>(k)].value;
  for (Eigen::Index i = 0; i < z.size(); ++i)
    out.residual_norm += std::pow(Gauss2d<double>::value(q, xy(i, 0), xy(i, 1)) - z[i], 2);
  out.converged = true;
  out.n_iter = report.iterations;
  for (double s : report.ssr_trace) out.ssr_trace.push_back(s * zs * zs);
  return out;
}

FitResult fit_lorentz_dip(const Eigen::VectorXd& f, const Eigen::VectorXd& y, const Units& units,
                          const LmOptions<double>& options) {
  const Guess g = initial_guess_lorentz_dip(f, y);
  const Scale sf = Scale::of(f.minCoeff(), f.maxCoeff());
  const double ys = y.cwiseAbs().maxCoeff();
  const Eigen::VectorXd fn = f.unaryExpr([&](double v) { return sf.to(v); });
  const Eigen::VectorXd yn = y / ys;

  Eigen::VectorXd p0(4);
  p0 << g.at("offset") / ys, g.at("c"), sf.to(g.at("f0")), g.at("fwhm") / sf.half;
  auto residuals = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd r(fn.size());
    for (Eigen::Index i = 0; i < fn.size(); ++i) r[i] = LorentzDip<double>::value(p, fn[i]) - yn[i];
    return r;
  };
  const auto report = levenberg_marquardt<double>(residuals, p0, options);
  require_converged(report, "lorentz_dip");
  const Eigen::VectorXd se = standard_errors(report.jacobian, report.ssr);
  const Eigen::VectorXd& p = report.params;

  FitResult out;
  out.model = Model::lorentz_dip;
  out.params = {{"offset", p[0] * ys, se[0] * ys, units.y},
                {"c", p[1], se[1], ""},
                {"f0", sf.from(p[2]), se[2] * sf.half, units.x},
                {"fwhm", std::abs(p[3]) * sf.half, se[3] * sf.half, units.x}};
  Eigen::VectorXd q(4);
  for (int k = 0; k < 4; ++k) q[k] = out.params[static_cast<std::size_t>(k)].value;
  for (Eigen::Index i = 0; i < f.size(); ++i)
    out.residual_norm += std::pow(LorentzDip<double>::value(q, f[i]) - y[i], 2);
  out.converged = true;
  out.n_iter = report.iterations;
  for (double s : report.ssr_trace) out.ssr_trace.push_back(s * ys * ys);
  return out;
}

double evaluate(const FitResult& fit, double x) {
  Eigen::VectorXd p(static_cast<Eigen::Index>(fit.params.size()));
  for (std::size_t k = 0; k < fit.params.size(); ++k) p[static_cast<Eigen::Index>(k)] = fit.params[k].value;
  switch (fit.model) {
    case Model::gauss1d: return Gauss1d<double>::value(p, x);
    case Model::lorentz_dip: return LorentzDip<double>::value(p, x);
    case Model::gauss2d: break;
  }
  fail(ErrorKind::Precondition, "evaluate() needs a one-dimensional model");
}

}  // namespace labkit::fit
