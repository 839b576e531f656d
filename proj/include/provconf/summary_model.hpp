#pragma once

// Provider summary statistics, outcome families, naive and corrected
// Z-scores, and the null mean/variance of the naive Z-score.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "provconf/error.hpp"

namespace provconf {

/// Public statistics for one provider.
struct ProviderSummary
{
  std::string id;
  double observed = 0.0;        ///< O: observed outcome count (or sum)
  double expected = 0.0;        ///< E: sum of b'(theta0) over patients
  double effective_size = 0.0;  ///< n~: sum of b''(theta0) over patients
  Eigen::VectorXd covariates;   ///< W, provider-level confounders
  std::optional<double> n_patients;  ///< required by the Normal family
  std::optional<double> b3_sum;      ///< sum of b'''(theta0); required by ExpFamilyApprox
};

enum class FamilyKind { Normal, Poisson, QuasiPoisson, ExpFamilyApprox };

inline std::string_view to_string(FamilyKind kind)
{
  switch (kind) {
    case FamilyKind::Normal: return "normal";
    case FamilyKind::Poisson: return "poisson";
    case FamilyKind::QuasiPoisson: return "quasipoisson";
    case FamilyKind::ExpFamilyApprox: return "expfamily";
  }
  return "unknown";
}

inline FamilyKind parse_family_kind(std::string_view name)
{
  if (name == "normal")
    return FamilyKind::Normal;
  if (name == "poisson")
    return FamilyKind::Poisson;
  if (name == "quasipoisson" || name == "quasi-poisson")
    return FamilyKind::QuasiPoisson;
  if (name == "expfamily" || name == "expfamily-approx")
    return FamilyKind::ExpFamilyApprox;
  throw ValidationError("unknown family '" + std::string(name) + "'");
}

/// Outcome family and its dispersion a(psi). For Normal the dispersion is the
/// residual variance; Poisson always has dispersion 1.
class Family
{
 public:
  Family(FamilyKind kind, double dispersion) : kind_(kind), dispersion_(dispersion)
  {
    if (kind == FamilyKind::Poisson)
      dispersion_ = 1.0;
    if (!(dispersion_ > 0.0) || !std::isfinite(dispersion_))
      throw ValidationError("family dispersion must be positive and finite");
  }

  static Family normal(double sigma2_eps) { return {FamilyKind::Normal, sigma2_eps}; }
  static Family poisson() { return {FamilyKind::Poisson, 1.0}; }
  static Family quasi_poisson(double psi) { return {FamilyKind::QuasiPoisson, psi}; }
  static Family exp_family(double a_psi) { return {FamilyKind::ExpFamilyApprox, a_psi}; }

  FamilyKind kind() const noexcept { return kind_; }
  double dispersion() const noexcept { return dispersion_; }

  bool operator==(const Family&) const = default;

 private:
  FamilyKind kind_;
  double dispersion_;
};

/// Confounding parameters: effect of W and variance of the unobserved term.
struct ConfoundingParams
{
  Eigen::VectorXd nu;
  double sigma2_alpha = 0.0;

  /// sigma2_alpha / a(psi)
  double varphi(const Family& family) const { return sigma2_alpha / family.dispersion(); }
};

struct NullMoments
{
  double mean = 0.0;
  double variance = 1.0;

  double sd() const { return std::sqrt(variance); }
};

// ---------------------------------------------------------------------------

inline void validate(const ProviderSummary& p, const Family& family)
{
  auto fail = [&](const std::string& what) {
    throw ValidationError("provider '" + p.id + "': " + what);
  };
  if (!std::isfinite(p.observed) || !std::isfinite(p.expected))
    fail("observed and expected must be finite");
  // Normal outcomes are sums of continuous responses and may take any sign.
  if (family.kind() != FamilyKind::Normal) {
    if (p.observed < 0.0)
      fail("observed must be nonnegative");
    if (!(p.expected > 0.0))
      fail("expected must be positive");
  }
  if (!std::isfinite(p.effective_size) || !(p.effective_size > 0.0))
    fail("effective_size must be finite and positive");
  if (!p.covariates.allFinite())
    fail("covariates must be finite");
  if (family.kind() == FamilyKind::Normal) {
    if (!p.n_patients || !(*p.n_patients > 0.0) || !std::isfinite(*p.n_patients))
      fail("the normal family requires a positive n_patients");
  }
  if (family.kind() == FamilyKind::ExpFamilyApprox) {
    if (!p.b3_sum || !std::isfinite(*p.b3_sum))
      fail("the exponential-family approximation requires b3_sum");
  }
}

/// Validates every provider and checks the covariate dimension is shared.
inline void validate(std::span<const ProviderSummary> providers, const Family& family)
{
  if (providers.empty())
    throw ValidationError("no providers");
  const auto dim = providers.front().covariates.size();
  for (const auto& p : providers) {
    validate(p, family);
    if (p.covariates.size() != dim)
      throw ValidationError("provider '" + p.id + "' has " + std::to_string(p.covariates.size()) +
                            " covariates, expected " + std::to_string(dim));
  }
}

/// Size that scales the Z-score: n_i for Normal, n~_i otherwise.
inline double information_size(const ProviderSummary& p, const Family& family)
{
  return family.kind() == FamilyKind::Normal ? *p.n_patients : p.effective_size;
}

/// (O - E) / sqrt(a(psi) * n~)
inline double naive_z(const ProviderSummary& p, const Family& family)
{
  if (!std::isfinite(p.observed) || !std::isfinite(p.expected) ||
      !std::isfinite(p.effective_size) || !(p.effective_size > 0.0))
    throw ValidationError("provider '" + p.id + "': non-finite or invalid inputs to naive_z");
  return (p.observed - p.expected) / std::sqrt(family.dispersion() * p.effective_size);
}

inline std::vector<double> naive_z(std::span<const ProviderSummary> providers, const Family& family)
{
  std::vector<double> z;
  z.reserve(providers.size());
  for (const auto& p : providers)
    z.push_back(naive_z(p, family));
  return z;
}

/// Null moments given the linear predictor W'nu already evaluated. Returns
/// nullopt when the variance is not strictly positive and finite.
inline std::optional<NullMoments> try_null_moments(const ProviderSummary& p, const Family& family,
                                                   double w_nu, double sigma2_alpha)
{
  NullMoments m;
  const double a = family.dispersion();
  const double varphi = sigma2_alpha / a;
  switch (family.kind()) {
    case FamilyKind::Normal: {
      const double n = *p.n_patients;
      m.mean = std::sqrt(n / a) * w_nu;
      m.variance = 1.0 + varphi * n;
      break;
    }
    case FamilyKind::Poisson:
    case FamilyKind::QuasiPoisson: {
      // Exact lognormal-mixed Poisson moments; a = 1 recovers plain Poisson.
      const double n = p.effective_size;
      const double ratio = std::exp(w_nu + 0.5 * sigma2_alpha);
      m.mean = std::sqrt(n / a) * (ratio - 1.0);
      m.variance = ratio * (1.0 + ratio * std::expm1(sigma2_alpha) * n / a);
      break;
    }
    case FamilyKind::ExpFamilyApprox: {
      const double n = p.effective_size;
      m.mean = std::sqrt(n / a) * w_nu;
      m.variance = 1.0 + (*p.b3_sum / n) * w_nu + varphi * n;
      break;
    }
  }
  if (!(m.variance > 0.0) || !std::isfinite(m.variance) || !std::isfinite(m.mean))
    return std::nullopt;
  return m;
}

/// E[Z | gamma* = 0] and Var[Z | gamma* = 0] under the family's model.
inline NullMoments null_moments(const ProviderSummary& p, const Family& family,
                                const ConfoundingParams& params)
{
  if (params.nu.size() != p.covariates.size())
    throw ValidationError("nu has dimension " + std::to_string(params.nu.size()) +
                          " but provider '" + p.id + "' has " +
                          std::to_string(p.covariates.size()) + " covariates");
  if (!(params.sigma2_alpha >= 0.0))
    throw ValidationError("sigma2_alpha must be nonnegative");
  const double w_nu = p.covariates.dot(params.nu);
  auto m = try_null_moments(p, family, w_nu, params.sigma2_alpha);
  if (!m) {
    const double a = family.dispersion();
    const double n = p.effective_size;
    const double var = (family.kind() == FamilyKind::ExpFamilyApprox)
                           ? 1.0 + (*p.b3_sum / n) * w_nu + params.sigma2_alpha / a * n
                           : std::numeric_limits<double>::quiet_NaN();
    throw DegenerateVarianceError(p.id, var);
  }
  return *m;
}

/// Z standardized by the fitted null moments.
inline double corrected_z(const ProviderSummary& p, const Family& family,
                          const ConfoundingParams& params)
{
  const auto m = null_moments(p, family, params);
  return (naive_z(p, family) - m.mean) / m.sd();
}

inline std::vector<double> corrected_z(std::span<const ProviderSummary> providers,
                                       const Family& family, const ConfoundingParams& params)
{
  std::vector<double> z;
  z.reserve(providers.size());
  for (const auto& p : providers)
    z.push_back(corrected_z(p, family, params));
  return z;
}

inline Eigen::MatrixXd covariate_matrix(std::span<const ProviderSummary> providers)
{
  const auto rows = static_cast<Eigen::Index>(providers.size());
  const auto cols = providers.empty() ? 0 : providers.front().covariates.size();
  Eigen::MatrixXd w(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    w.row(i) = providers[static_cast<std::size_t>(i)].covariates.transpose();
  return w;
}

}  // namespace provconf
