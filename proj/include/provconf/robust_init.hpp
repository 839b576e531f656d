#pragma once

// Starting values for the empirical-null fit: a Huber M-estimate of the
// regression of naive Z-scores on sqrt(n~/a) W, followed by a moment-style
// estimate of sigma2_alpha from the robust residual scale.

#include <Eigen/Core>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "provconf/error.hpp"
#include "provconf/stats.hpp"
#include "provconf/summary_model.hpp"

namespace provconf {

struct HuberOptions
{
  double tuning = 1.345;
  double tolerance = 1e-8;  ///< max absolute coefficient change
  int max_iterations = 200;
  double scale_floor = 1e-8;
};

struct HuberResult
{
  Eigen::VectorXd coefficients;
  double scale = 1.0;
  int iterations = 0;
  bool converged = false;
};

struct InitEstimate
{
  Eigen::VectorXd nu0;
  double scale0 = 1.0;
  double sigma2_alpha0 = 0.0;
  bool converged = true;
};

namespace detail {

// Normalized MAD of regression residuals about zero.
inline double residual_scale(const Eigen::VectorXd& residuals, double floor)
{
  constexpr double mad_to_sd = 1.482602218505602;  // 1 / Phi^{-1}(3/4)
  std::vector<double> abs_r(static_cast<std::size_t>(residuals.size()));
  for (Eigen::Index i = 0; i < residuals.size(); ++i)
    abs_r[static_cast<std::size_t>(i)] = std::abs(residuals(i));
  return std::max(mad_to_sd * stats::median(std::move(abs_r)), floor);
}

inline Eigen::VectorXd weighted_least_squares(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                              const Eigen::VectorXd& w)
{
  const Eigen::VectorXd sw = w.array().sqrt();
  const Eigen::MatrixXd xw = sw.asDiagonal() * x;
  const Eigen::VectorXd yw = sw.asDiagonal() * y;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xw);
  if (qr.rank() < x.cols())
    throw SingularDesignError("weighted design matrix is rank deficient");
  return qr.solve(yw);
}

}  // namespace detail

/// Huber M-estimate by IRLS, with the residual scale re-estimated by MAD at
/// every iteration. Starts from ordinary least squares.
inline HuberResult huber_regression(const Eigen::VectorXd& responses, const Eigen::MatrixXd& design,
                                    const HuberOptions& options = {})
{
  const auto n = design.rows();
  const auto p = design.cols();
  if (responses.size() != n)
    throw ValidationError("huber_regression: response and design row counts differ");
  if (n <= p)
    throw ValidationError("huber_regression: need more observations than coefficients");
  if (!(options.tuning > 0.0))
    throw ValidationError("huber_regression: tuning constant must be positive");
  if (!responses.allFinite() || !design.allFinite())
    throw ValidationError("huber_regression: non-finite input");

  HuberResult result;
  if (p == 0) {
    // Location-free model: only the scale is estimated.
    result.coefficients = Eigen::VectorXd(0);
    result.scale = detail::residual_scale(responses, options.scale_floor);
    result.converged = true;
    return result;
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < p)
    throw SingularDesignError("huber_regression: design matrix is rank deficient");

  result.coefficients = qr.solve(responses);
  Eigen::VectorXd residuals = responses - design * result.coefficients;
  result.scale = detail::residual_scale(residuals, options.scale_floor);

  Eigen::VectorXd weights(n);
  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double u = std::abs(residuals(i)) / result.scale;
      weights(i) = (u <= options.tuning) ? 1.0 : options.tuning / u;
    }
    Eigen::VectorXd next = detail::weighted_least_squares(design, responses, weights);
    const double change = (next - result.coefficients).cwiseAbs().maxCoeff();
    result.coefficients = std::move(next);
    residuals = responses - design * result.coefficients;
    result.scale = detail::residual_scale(residuals, options.scale_floor);
    result.iterations = iter;
    if (change < options.tolerance) {
      result.converged = true;
      break;
    }
  }
  return result;
}

/// Initial (nu, scale, sigma2_alpha). The sigma2_alpha formula
///   a(psi) * (s^2 - 1 - median(W'nu)) / median(n~)
/// is clamped at zero.
inline InitEstimate initialize(std::span<const ProviderSummary> providers, const Family& family,
                               const HuberOptions& options = {})
{
  validate(providers, family);
  const auto count = static_cast<Eigen::Index>(providers.size());
  const auto dim = providers.front().covariates.size();
  if (count < dim + 2)
    throw ValidationError("initialize: need at least P + 2 providers");

  Eigen::VectorXd z(count);
  Eigen::MatrixXd x(count, dim);
  std::vector<double> sizes(providers.size());
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto& p = providers[static_cast<std::size_t>(i)];
    const double size = information_size(p, family);
    z(i) = naive_z(p, family);
    x.row(i) = std::sqrt(size / family.dispersion()) * p.covariates.transpose();
    sizes[static_cast<std::size_t>(i)] = size;
  }

  const HuberResult fit = huber_regression(z, x, options);

  std::vector<double> w_nu(providers.size());
  for (std::size_t i = 0; i < providers.size(); ++i)
    w_nu[i] = providers[i].covariates.dot(fit.coefficients);

  InitEstimate init;
  init.nu0 = fit.coefficients;
  init.scale0 = fit.scale;
  init.converged = fit.converged;
  const double varphi0 = (fit.scale * fit.scale - 1.0 - stats::median(std::move(w_nu))) /
                         stats::median(std::move(sizes));
  init.sigma2_alpha0 = std::max(0.0, family.dispersion() * varphi0);
  return init;
}

}  // namespace provconf
