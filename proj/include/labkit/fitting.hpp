#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "labkit/lm.hpp"

namespace labkit::fit {

enum class Model { gauss1d, gauss2d, lorentz_dip };

std::string_view to_string(Model model);

// y = offset + A exp(-(x - x0)^2 / (2 sigma^2)); params (A, x0, sigma, offset)
template <typename Scalar>
struct Gauss1d {
  static constexpr int kParams = 4;
  static constexpr std::array<const char*, 4> kNames{"A", "x0", "sigma", "offset"};

  static Scalar value(const Vector<Scalar>& p, Scalar x) {
    const Scalar u = (x - p[1]) / p[2];
    return p[3] + p[0] * std::exp(-u * u / Scalar(2));
  }

  static Eigen::Matrix<Scalar, 1, 4> gradient(const Vector<Scalar>& p, Scalar x) {
    const Scalar u = (x - p[1]) / p[2];
    const Scalar e = std::exp(-u * u / Scalar(2));
    Eigen::Matrix<Scalar, 1, 4> g;
    g << e, p[0] * e * u / p[2], p[0] * e * u * u / p[2], Scalar(1);
    return g;
  }
};

// z = offset + A exp(-(x - x0)^2 / (2 sx^2) - (y - y0)^2 / (2 sy^2));
// params (A, x0, y0, sigma_x, sigma_y, offset)
template <typename Scalar>
struct Gauss2d {
  static constexpr int kParams = 6;
  static constexpr std::array<const char*, 6> kNames{"A", "x0", "y0", "sigma_x", "sigma_y", "offset"};

  static Scalar value(const Vector<Scalar>& p, Scalar x, Scalar y) {
    const Scalar u = (x - p[1]) / p[3];
    const Scalar v = (y - p[2]) / p[4];
    return p[5] + p[0] * std::exp(-(u * u + v * v) / Scalar(2));
  }

  static Eigen::Matrix<Scalar, 1, 6> gradient(const Vector<Scalar>& p, Scalar x, Scalar y) {
    const Scalar u = (x - p[1]) / p[3];
    const Scalar v = (y - p[2]) / p[4];
    const Scalar e = std::exp(-(u * u + v * v) / Scalar(2));
    Eigen::Matrix<Scalar, 1, 6> g;
    g << e, p[0] * e * u / p[3], p[0] * e * v / p[4], p[0] * e * u * u / p[3],
        p[0] * e * v * v / p[4], Scalar(1);
    return g;
  }
};

// y = offset (1 - c (G/2)^2 / ((f - f0)^2 + (G/2)^2)); params (offset, c, f0, fwhm)
template <typename Scalar>
struct LorentzDip {
  static constexpr int kParams = 4;
  static constexpr std::array<const char*, 4> kNames{"offset", "c", "f0", "fwhm"};

  static Scalar value(const Vector<Scalar>& p, Scalar f) {
    const Scalar h = p[3] / Scalar(2);
    const Scalar d = f - p[2];
    return p[0] * (Scalar(1) - p[1] * h * h / (d * d + h * h));
  }

  static Eigen::Matrix<Scalar, 1, 4> gradient(const Vector<Scalar>& p, Scalar f) {
    const Scalar h = p[3] / Scalar(2);
    const Scalar d = f - p[2];
    const Scalar q = d * d + h * h;
    const Scalar l = h * h / q;
    Eigen::Matrix<Scalar, 1, 4> g;
    g << Scalar(1) - p[1] * l,                       // d/d offset
        -p[0] * l,                                    // d/d c
        -p[0] * p[1] * h * h * Scalar(2) * d / (q * q),  // d/d f0
        -p[0] * p[1] * h * d * d / (q * q);           // d/d fwhm  (dl/dh * 1/2)
    return g;
  }
};

struct Parameter {
  std::string name;
  double value = 0.0;
  double std_error = 0.0;
  std::string unit;
};

struct FitResult {
  Model model = Model::gauss1d;
  std::vector<Parameter> params;  // in the model's canonical order
  double residual_norm = 0.0;     // sum of squared residuals
  bool converged = false;
  int n_iter = 0;
  std::vector<double> ssr_trace;  // original units

  double value(std::string_view name) const;
  double std_error_of(std::string_view name) const;
  bool has(std::string_view name) const;
};

nlohmann::json to_json(const FitResult& fit);

struct Units {
  std::string x;
  std::string y;
};

using Guess = std::map<std::string, double>;

// Heuristic starting point. Offset is the 10th (peak models) or 90th (dip)
// percentile; amplitude/contrast from the extremum; centre and width from the
// contiguous half-maximum region around the extremum.
Guess initial_guess_gauss1d(const Eigen::VectorXd& x, const Eigen::VectorXd& y);
Guess initial_guess_gauss2d(const Eigen::MatrixX2d& xy, const Eigen::VectorXd& z);
Guess initial_guess_lorentz_dip(const Eigen::VectorXd& f, const Eigen::VectorXd& y);

// Throw DegenerateData, NoConvergence or Precondition (bad shapes).
FitResult fit_gauss1d(const Eigen::VectorXd& x, const Eigen::VectorXd& y, const Units& units = {},
                      const LmOptions<double>& options = {});
FitResult fit_gauss2d(const Eigen::MatrixX2d& xy, const Eigen::VectorXd& z, const Units& units = {},
                      const LmOptions<double>& options = {});
FitResult fit_lorentz_dip(const Eigen::VectorXd& f, const Eigen::VectorXd& y,
                          const Units& units = {}, const LmOptions<double>& options = {});

// Model value of a fitted one-dimensional result (gauss1d or lorentz_dip).
double evaluate(const FitResult& fit, double x);

// Linear-interpolated percentile, q in [0, 100].
double percentile(std::vector<double> values, double q);

}  // namespace labkit::fit
