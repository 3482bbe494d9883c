#pragma once

// Levenberg-Marquardt least squares with a central-difference Jacobian.
// Header-only; templated on the scalar type.

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

namespace labkit::fit {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
struct LmOptions {
  Scalar lambda_initial = Scalar(1e-3);
  Scalar lambda_factor = Scalar(10);
  Scalar lambda_max = Scalar(1e16);
  Scalar relative_ssr_tolerance = Scalar(1e-10);
  Scalar step_tolerance = Scalar(1e-12);
  int max_iterations = 200;
  // Central-difference step relative to max(|p_i|, 1).
  Scalar difference_step = std::cbrt(std::numeric_limits<Scalar>::epsilon());
};

template <typename Scalar>
struct LmReport {
  Vector<Scalar> params;
  Scalar ssr = Scalar(0);
  bool converged = false;
  int iterations = 0;
  // SSR at the start and after every accepted step.
  std::vector<Scalar> ssr_trace;
  Matrix<Scalar> jacobian;  // at the final parameters
};

template <typename Scalar, typename Residuals>
Matrix<Scalar> central_difference_jacobian(Residuals& residuals, const Vector<Scalar>& p,
                                           Scalar relative_step) {
  const Vector<Scalar> r0 = residuals(p);
  Matrix<Scalar> jac(r0.size(), p.size());
  Vector<Scalar> probe = p;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const Scalar h = relative_step * std::max(std::abs(p[k]), Scalar(1));
    probe[k] = p[k] + h;
    const Vector<Scalar> up = residuals(probe);
    probe[k] = p[k] - h;
    const Vector<Scalar> down = residuals(probe);
    probe[k] = p[k];
    jac.col(k) = (up - down) / (Scalar(2) * h);
  }
  return jac;
}

// `residuals(p)` returns the residual vector; minimises its squared norm.
template <typename Scalar, typename Residuals>
LmReport<Scalar> levenberg_marquardt(Residuals&& residuals, Vector<Scalar> p,
                                     const LmOptions<Scalar>& opt = {}) {
  LmReport<Scalar> report;
  Vector<Scalar> r = residuals(p);
  Scalar ssr = r.squaredNorm();
  report.ssr_trace.push_back(ssr);
  if (!std::isfinite(ssr)) {
    report.params = p;
    report.ssr = ssr;
    return report;
  }

  Scalar lambda = opt.lambda_initial;
  Matrix<Scalar> jac = central_difference_jacobian<Scalar>(residuals, p, opt.difference_step);
  bool converged = ssr == Scalar(0);

  while (!converged && report.iterations < opt.max_iterations) {
    ++report.iterations;
    const Matrix<Scalar> jtj = jac.transpose() * jac;
    const Vector<Scalar> gradient = jac.transpose() * r;
    Vector<Scalar> diag = jtj.diagonal();
    const Scalar floor = std::max(diag.maxCoeff(), Scalar(1)) * std::numeric_limits<Scalar>::epsilon();
    diag = diag.cwiseMax(floor);

    Matrix<Scalar> damped = jtj;
    damped.diagonal() += lambda * diag;
    const Vector<Scalar> step = damped.ldlt().solve(-gradient);
    const Vector<Scalar> trial = p + step;
    const Vector<Scalar> r_trial = residuals(trial);
    const Scalar ssr_trial = r_trial.squaredNorm();

    if (std::isfinite(ssr_trial) && step.allFinite() && ssr_trial < ssr) {
      const Scalar decrease = ssr - ssr_trial;
      p = trial;
      r = r_trial;
      const Scalar previous = ssr;
      ssr = ssr_trial;
      report.ssr_trace.push_back(ssr);
      lambda = std::max(lambda / opt.lambda_factor, std::numeric_limits<Scalar>::min());
      if (decrease <= opt.relative_ssr_tolerance * previous ||
          step.norm() <= opt.step_tolerance * (p.norm() + opt.step_tolerance) || ssr == Scalar(0)) {
        converged = true;
        break;
      }
      jac = central_difference_jacobian<Scalar>(residuals, p, opt.difference_step);
    } else {
      lambda *= opt.lambda_factor;
      // No damped step reduces the SSR any more: numerically at the minimum.
      if (lambda > opt.lambda_max) converged = true;
    }
  }

  report.params = p;
  report.ssr = ssr;
  report.converged = converged && std::isfinite(ssr);
  report.jacobian = central_difference_jacobian<Scalar>(residuals, p, opt.difference_step);
  return report;
}

}  // namespace labkit::fit
