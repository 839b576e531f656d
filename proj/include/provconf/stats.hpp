#pragma once

// Special functions used throughout: normal and gamma distributions, and
// Gauss-Hermite rules.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "provconf/error.hpp"

namespace provconf::stats {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Normal distribution

inline double normal_log_pdf(double x)
{
  return -0.5 * x * x - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double normal_pdf(double x) { return std::exp(normal_log_pdf(x)); }

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Upper tail 1 - Phi(x), accurate in the far right tail.
inline double normal_sf(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

/// P(a <= X <= b) for standard normal X. Differences of tails are taken on the
/// side of zero where both endpoints lie so nothing cancels catastrophically.
inline double normal_interval_prob(double a, double b)
{
  if (!(b > a))
    return 0.0;
  if (a >= 0.0)
    return normal_sf(a) - normal_sf(b);
  if (b <= 0.0)
    return normal_cdf(b) - normal_cdf(a);
  return 1.0 - normal_cdf(a) - normal_sf(b);
}

/// Inverse standard normal CDF. Rational starting approximation followed by
/// Halley refinement against erfc.
inline double normal_quantile(double p)
{
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0)
      return -kInf;
    if (p == 1.0)
      return kInf;
    throw ValidationError("normal_quantile: p must lie in [0, 1]");
  }
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;

  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }

  for (int iter = 0; iter < 2; ++iter) {
    // Work in the smaller tail so the residual keeps its relative precision.
    const double e = (p < 0.5) ? normal_cdf(x) - p : (1.0 - p) - normal_sf(x);
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    x = x - u / (1.0 + 0.5 * x * u);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Incomplete gamma

namespace detail {

inline constexpr int kGammaMaxIter = 1'000'000;
inline constexpr double kGammaEps = 2.0 * std::numeric_limits<double>::epsilon();

// lgamma(a) - ((a - 1/2) log a - a + log(2 pi) / 2), Stirling series for a >= 10.
inline double stirling_tail(double a)
{
  const double r = 1.0 / a, r2 = r * r;
  return r * (1.0 / 12.0 -
              r2 * (1.0 / 360.0 -
                    r2 * (1.0 / 1260.0 -
                          r2 * (1.0 / 1680.0 - r2 * (1.0 / 1188.0 - r2 * 691.0 / 360360.0)))));
}

// log(x^a e^-x / Gamma(a)). For large a the terms a log x and lgamma(a) nearly
// cancel, so the Stirling form is used instead.
inline double gamma_log_prefactor(double a, double x)
{
  if (a < 10.0)
    return -x + a * std::log(x) - std::lgamma(a);
  const double d = (x - a) / a;
  return a * (std::log1p(d) - d) + 0.5 * std::log(a / (2.0 * std::numbers::pi)) -
         stirling_tail(a);
}

// P(a, x) by its power series, valid for x < a + 1.
inline double gamma_p_series(double a, double x)
{
  const double log_pre = gamma_log_prefactor(a, x);
  if (log_pre < -760.0)
    return 0.0;
  double ap = a;
  double del = 1.0 / a;
  double sum = del;
  for (int n = 0; n < kGammaMaxIter; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kGammaEps)
      return sum * std::exp(log_pre);
  }
  throw NumericalError("incomplete gamma series failed to converge");
}

// Q(a, x) by modified Lentz continued fraction, valid for x >= a + 1.
inline double gamma_q_fraction(double a, double x)
{
  const double log_pre = gamma_log_prefactor(a, x);
  if (log_pre < -760.0)
    return 0.0;
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kGammaMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny)
      d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny)
      c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kGammaEps)
      return h * std::exp(log_pre);
  }
  throw NumericalError("incomplete gamma continued fraction failed to converge");
}

}  // namespace detail

/// Regularized lower incomplete gamma P(a, x).
inline double regularized_gamma_p(double a, double x)
{
  if (!(a > 0.0))
    throw ValidationError("regularized_gamma_p: shape must be positive");
  if (x <= 0.0)
    return 0.0;
  if (std::isinf(x))
    return 1.0;
  if (x < a + 1.0)
    return detail::gamma_p_series(a, x);
  return 1.0 - detail::gamma_q_fraction(a, x);
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
inline double regularized_gamma_q(double a, double x)
{
  if (!(a > 0.0))
    throw ValidationError("regularized_gamma_q: shape must be positive");
  if (x <= 0.0)
    return 1.0;
  if (std::isinf(x))
    return 0.0;
  if (x < a + 1.0)
    return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_fraction(a, x);
}

// ---------------------------------------------------------------------------
// Gamma distribution, shape/rate parameterization

inline double gamma_log_pdf(double x, double shape, double rate)
{
  if (x <= 0.0)
    return (x == 0.0 && shape == 1.0) ? std::log(rate) : -kInf;
  // rate * prefactor(shape, rate x) / (rate x)
  const double y = rate * x;
  return detail::gamma_log_prefactor(shape, y) - std::log(x);
}

inline double gamma_pdf(double x, double shape, double rate)
{
  return std::exp(gamma_log_pdf(x, shape, rate));
}

inline double gamma_cdf(double x, double shape, double rate)
{
  return regularized_gamma_p(shape, rate * x);
}

inline double gamma_sf(double x, double shape, double rate)
{
  return regularized_gamma_q(shape, rate * x);
}

/// Inverse gamma CDF. Wilson-Hilferty start, then safeguarded Newton on log x.
inline double gamma_quantile(double p, double shape, double rate)
{
  if (!(p > 0.0 && p < 1.0))
    throw ValidationError("gamma_quantile: p must lie in (0, 1)");
  if (!(shape > 0.0 && rate > 0.0))
    throw ValidationError("gamma_quantile: shape and rate must be positive");

  // Work with the unit-rate variable and rescale at the end.
  const double z = normal_quantile(p);
  const double h = 1.0 / (9.0 * shape);
  double x = shape * std::pow(std::max(1.0 - h + z * std::sqrt(h), 1e-3), 3.0);
  if (!(x > 0.0) || !std::isfinite(x))
    x = shape;

  double lo = 0.0;
  double hi = kInf;
  const bool upper = p > 0.5;
  const double target = upper ? 1.0 - p : p;
  for (int iter = 0; iter < 200; ++iter) {
    const double tail = upper ? regularized_gamma_q(shape, x) : regularized_gamma_p(shape, x);
    const double f = upper ? target - tail : tail - target;  // increasing in x
    if (f > 0.0)
      hi = x;
    else
      lo = x;
    const double dens = std::exp(gamma_log_pdf(x, shape, 1.0));
    double step = (dens > 0.0) ? f / (dens * x) : 0.0;  // Newton step in log x
    step = std::clamp(step, -2.0, 2.0);
    double next = x * std::exp(-step);
    if (!(next > lo && next < hi) || dens <= 0.0)
      next = std::isinf(hi) ? 2.0 * std::max(x, 1.0) : 0.5 * (lo + hi);
    if (std::abs(next - x) <= 1e-15 * x)
      return next / rate;
    x = next;
  }
  return x / rate;
}

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature for weight exp(-x^2)

struct GaussHermiteRule
{
  std::vector<double> nodes;
  std::vector<double> weights;         // sum to sqrt(pi)
  std::vector<double> scaled_weights;  // weights * exp(node^2), for reweighted rules
};

inline GaussHermiteRule gauss_hermite(int n)
{
  if (n < 1)
    throw ValidationError("gauss_hermite: need at least one node");
  // Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix of the
  // Hermite recurrence, weights sqrt(pi) times squared first eigenvector entries.
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd sub(std::max(n - 1, 0));
  for (int k = 1; k < n; ++k)
    sub(k - 1) = std::sqrt(0.5 * k);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig;
  eig.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  if (eig.info() != Eigen::Success)
    throw NumericalError("gauss_hermite: eigen decomposition failed");
  GaussHermiteRule rule;
  rule.nodes.resize(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k)
    rule.nodes[static_cast<std::size_t>(k)] = eig.eigenvalues()(k);
  // Exact symmetry about zero.
  for (int k = 0; k < n / 2; ++k) {
    const auto lo = static_cast<std::size_t>(k);
    const auto hi = static_cast<std::size_t>(n - 1 - k);
    const double x = 0.5 * (rule.nodes[hi] - rule.nodes[lo]);
    rule.nodes[lo] = -x;
    rule.nodes[hi] = x;
  }
  if (n % 2 == 1)
    rule.nodes[static_cast<std::size_t>(n / 2)] = 0.0;

  // Christoffel function with normalized Hermite functions psi_j, which stay
  // bounded: w exp(x^2) = 1 / sum_j psi_j(x)^2. This keeps full relative
  // accuracy for the tiny tail weights that eigenvectors cannot resolve.
  rule.weights.resize(static_cast<std::size_t>(n));
  rule.scaled_weights.resize(static_cast<std::size_t>(n));
  const double pim4 = std::pow(std::numbers::pi, -0.25);
  for (int k = 0; k < n; ++k) {
    const double x = rule.nodes[static_cast<std::size_t>(k)];
    double prev = 0.0;
    double cur = pim4 * std::exp(-0.5 * x * x);
    double sum = cur * cur;
    for (int j = 1; j < n; ++j) {
      const double next = std::sqrt(2.0 / j) * x * cur - std::sqrt((j - 1.0) / j) * prev;
      prev = cur;
      cur = next;
      sum += cur * cur;
    }
    const double scaled = 1.0 / sum;
    rule.scaled_weights[static_cast<std::size_t>(k)] = scaled;
    rule.weights[static_cast<std::size_t>(k)] = scaled * std::exp(-x * x);
  }
  return rule;
}

// ---------------------------------------------------------------------------
// Small sample summaries

inline double median(std::vector<double> values)
{
  if (values.empty())
    throw ValidationError("median of empty sample");
  const auto n = values.size();
  auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(values.begin(), mid, values.end());
  if (n % 2 == 1)
    return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(values.begin(), mid);
  return 0.5 * (lower + upper);
}

}  // namespace provconf::stats
