#pragma once

// Empirical-null fit of the confounding parameters. Providers whose naive Z
// falls inside a per-provider null interval contribute a normal density term,
// the rest contribute the probability of falling outside their interval. The
// null proportion pi0 is profiled over a grid; for each grid value (nu,
// log sigma2_alpha) is maximized by Nelder-Mead.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/QR>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "provconf/error.hpp"
#include "provconf/nelder_mead.hpp"
#include "provconf/parallel.hpp"
#include "provconf/robust_init.hpp"
#include "provconf/stats.hpp"
#include "provconf/summary_model.hpp"

namespace provconf {

struct NullInterval
{
  double lower = -stats::kInf;
  double upper = stats::kInf;

  bool contains(double z) const noexcept { return z >= lower && z <= upper; }
};

enum class FitMode {
  Robust,     ///< empirical-null likelihood over the pi0 grid
  NormalMle,  ///< pi0 = 1, every provider in the null set, untruncated densities
};

/// `points` equally spaced values on [lo, hi].
inline std::vector<double> make_pi0_grid(double lo = 0.02, double hi = 1.0, int points = 50)
{
  if (points < 1 || !(lo > 0.0) || !(hi <= 1.0) || !(lo <= hi))
    throw ValidationError("pi0 grid must satisfy 0 < lo <= hi <= 1 with at least one point");
  std::vector<double> grid(static_cast<std::size_t>(points));
  for (int k = 0; k < points; ++k)
    grid[static_cast<std::size_t>(k)] =
        points == 1 ? hi : lo + (hi - lo) * static_cast<double>(k) / (points - 1);
  return grid;
}

struct FitConfig
{
  FitMode mode = FitMode::Robust;
  std::vector<double> pi0_grid = make_pi0_grid();
  double interval_multiplier = 1.96;
  int refit_intervals = 0;
  HuberOptions huber;
  NelderMeadConfig optimizer = [] {
    NelderMeadConfig c;
    c.restarts = 1;
    return c;
  }();
  /// Lower bound applied to the initial sigma2_alpha so its log is finite.
  double sigma2_start_floor = 1e-3;
  double log_sigma2_step = 0.5;
  bool compute_covariance = true;
  unsigned threads = 1;
};

struct Pi0Profile
{
  double pi0 = 1.0;
  double loglik = -stats::kInf;
  ConfoundingParams params;
  bool converged = false;
  bool failed = false;
  int iterations = 0;
};

struct EnFit
{
  ConfoundingParams params;
  double pi0 = 1.0;
  double loglik = -stats::kInf;
  std::vector<bool> null_set;
  std::vector<NullInterval> intervals;
  Eigen::MatrixXd covariance;
  bool converged = false;
  InitEstimate init;
  std::vector<double> naive_z;
  std::vector<Pi0Profile> profile;
  std::vector<std::string> warnings;

  std::size_t null_count() const
  {
    std::size_t n = 0;
    for (bool b : null_set)
      n += b ? 1 : 0;
    return n;
  }
};

// ---------------------------------------------------------------------------

/// [E - m * sd, E + m * sd] from the null moments at the initial estimates.
inline std::vector<NullInterval> null_intervals(std::span<const ProviderSummary> providers,
                                                const Family& family, const InitEstimate& init,
                                                double multiplier = 1.96)
{
  if (!(multiplier > 0.0))
    throw ValidationError("null interval multiplier must be positive");
  if (!(init.sigma2_alpha0 >= 0.0))
    throw ValidationError("initial sigma2_alpha must be nonnegative");
  const ConfoundingParams params{init.nu0, init.sigma2_alpha0};
  std::vector<NullInterval> out;
  out.reserve(providers.size());
  for (const auto& p : providers) {
    const auto m = null_moments(p, family, params);
    const double half = multiplier * m.sd();
    out.push_back({m.mean - half, m.mean + half});
  }
  return out;
}

inline std::vector<bool> null_membership(std::span<const double> z,
                                         std::span<const NullInterval> intervals)
{
  if (z.size() != intervals.size())
    throw ValidationError("null_membership: size mismatch");
  std::vector<bool> in(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    in[i] = intervals[i].contains(z[i]);
  return in;
}

namespace detail {

/// Log-likelihood evaluator with the Z-scores and design cached.
class EnObjective
{
 public:
  EnObjective(std::span<const ProviderSummary> providers, const Family& family,
              std::vector<double> z, std::span<const NullInterval> intervals,
              const std::vector<bool>& null_set)
      : providers_(providers),
        family_(family),
        z_(std::move(z)),
        intervals_(intervals),
        null_set_(null_set),
        design_(covariate_matrix(providers))
  {
    if (z_.size() != providers.size() || intervals.size() != providers.size() ||
        null_set.size() != providers.size())
      throw ValidationError("log-likelihood inputs have inconsistent lengths");
  }

  double operator()(const Eigen::VectorXd& nu, double sigma2_alpha, double pi0) const
  {
    if (!(pi0 > 0.0 && pi0 <= 1.0) || !(sigma2_alpha >= 0.0) || !nu.allFinite() ||
        !std::isfinite(sigma2_alpha))
      return -stats::kInf;
    const Eigen::VectorXd w_nu = design_ * nu;
    const double log_pi0 = std::log(pi0);
    double total = 0.0;
    for (std::size_t i = 0; i < providers_.size(); ++i) {
      const auto m = try_null_moments(providers_[i], family_,
                                      w_nu(static_cast<Eigen::Index>(i)), sigma2_alpha);
      if (!m)
        return -stats::kInf;
      const double sd = m->sd();
      if (null_set_[i]) {
        total += log_pi0 + stats::normal_log_pdf((z_[i] - m->mean) / sd) - std::log(sd);
      } else {
        const double q = stats::normal_interval_prob((intervals_[i].lower - m->mean) / sd,
                                                     (intervals_[i].upper - m->mean) / sd);
        const double term = std::log1p(-pi0 * q);
        if (!std::isfinite(term))
          return -stats::kInf;
        total += term;
      }
    }
    return std::isnan(total) ? -stats::kInf : total;
  }

  const Eigen::MatrixXd& design() const { return design_; }

 private:
  std::span<const ProviderSummary> providers_;
  Family family_;
  std::vector<double> z_;
  std::span<const NullInterval> intervals_;
  const std::vector<bool>& null_set_;
  Eigen::MatrixXd design_;
};

}  // namespace detail

/// Empirical-null log-likelihood at (nu, sigma2_alpha, pi0). Returns -inf
/// rather than throwing when a term is undefined.
inline double log_likelihood(std::span<const ProviderSummary> providers, const Family& family,
                             const ConfoundingParams& params, double pi0,
                             std::span<const NullInterval> intervals,
                             const std::vector<bool>& null_set)
{
  if (!(pi0 > 0.0 && pi0 <= 1.0))
    throw ValidationError("pi0 must lie in (0, 1]");
  validate(providers, family);
  if (params.nu.size() != providers.front().covariates.size())
    throw ValidationError("nu dimension does not match the covariates");
  const detail::EnObjective objective(providers, family, naive_z(providers, family), intervals,
                                      null_set);
  return objective(params.nu, params.sigma2_alpha, pi0);
}

// ---------------------------------------------------------------------------

/// (X'X)^-1 X' diag(omega) X (X'X)^-1, symmetrized.
inline Eigen::MatrixXd sandwich(const Eigen::MatrixXd& design, const Eigen::VectorXd& omega)
{
  if (omega.size() != design.rows())
    throw ValidationError("sandwich: omega length must equal the design row count");
  const auto p = design.cols();
  if (p == 0)
    return Eigen::MatrixXd(0, 0);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (design.rows() < p || qr.rank() < p)
    throw SingularDesignError("sandwich: null-set design is rank deficient");
  const Eigen::MatrixXd xtx = design.transpose() * design;
  const Eigen::MatrixXd bread = xtx.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
  const Eigen::MatrixXd meat = design.transpose() * omega.asDiagonal() * design;
  const Eigen::MatrixXd cov = bread * meat * bread;
  return 0.5 * (cov + cov.transpose());
}

/// Heteroskedasticity-consistent covariance of nu-hat over the null set. The
/// design rows are sqrt(n~/a) W, the predictor scale of the null mean, and
/// Omega_ii is the first-order null variance at the fitted parameters.
inline Eigen::MatrixXd sandwich_covariance(std::span<const ProviderSummary> providers,
                                           const Family& family, const ConfoundingParams& params,
                                           const std::vector<bool>& null_set)
{
  validate(providers, family);
  if (null_set.size() != providers.size())
    throw ValidationError("sandwich_covariance: null set length mismatch");
  const auto dim = providers.front().covariates.size();
  if (params.nu.size() != dim)
    throw ValidationError("sandwich_covariance: nu dimension mismatch");

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < providers.size(); ++i)
    if (null_set[i])
      rows.push_back(i);

  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), dim);
  Eigen::VectorXd omega(static_cast<Eigen::Index>(rows.size()));
  const double varphi = params.varphi(family);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& p = providers[rows[r]];
    const double size = information_size(p, family);
    const double w_nu = p.covariates.dot(params.nu);
    double slope = 0.0;
    switch (family.kind()) {
      case FamilyKind::Normal: slope = 0.0; break;
      case FamilyKind::Poisson:
      case FamilyKind::QuasiPoisson: slope = 1.0; break;
      case FamilyKind::ExpFamilyApprox: slope = *p.b3_sum / p.effective_size; break;
    }
    const double w = 1.0 + slope * w_nu + varphi * size;
    if (!(w > 0.0) || !std::isfinite(w))
      throw DegenerateVarianceError(p.id, w);
    const auto ri = static_cast<Eigen::Index>(r);
    x.row(ri) = std::sqrt(size / family.dispersion()) * p.covariates.transpose();
    omega(ri) = w;
  }
  return sandwich(x, omega);
}

// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> nu_steps(const Eigen::MatrixXd& design, const Eigen::VectorXd& nu0)
{
  std::vector<double> steps(static_cast<std::size_t>(nu0.size()));
  for (Eigen::Index j = 0; j < nu0.size(); ++j) {
    const auto col = design.col(j);
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().mean());
    const double unit = sd > 0.0 ? 0.05 / sd : 0.05;
    steps[static_cast<std::size_t>(j)] = std::max(0.1 * std::abs(nu0(j)), unit);
  }
  return steps;
}

// One pass over the pi0 grid from a common start.
inline std::vector<Pi0Profile> profile_pi0(const EnObjective& objective,
                                           const std::vector<double>& grid,
                                           const Eigen::VectorXd& nu_start, double sigma2_start,
                                           const FitConfig& config)
{
  const auto dim = nu_start.size();
  Eigen::VectorXd start(dim + 1);
  start.head(dim) = nu_start;
  start(dim) = std::log(std::max(sigma2_start, config.sigma2_start_floor));

  NelderMeadConfig nm = config.optimizer;
  if (nm.initial_step.empty()) {
    nm.initial_step = nu_steps(objective.design(), nu_start);
    nm.initial_step.push_back(config.log_sigma2_step);
  }

  std::vector<Pi0Profile> profile(grid.size());
  parallel_for(grid.size(), config.threads, [&](std::size_t k) {
    const double pi0 = grid[k];
    auto f = [&](const Eigen::VectorXd& x) {
      return objective(x.head(dim), std::exp(x(dim)), pi0);
    };
    Pi0Profile& out = profile[k];
    out.pi0 = pi0;
    try {
      const auto r = nelder_mead(f, start, nm);
      out.params.nu = r.argmax.head(dim);
      out.params.sigma2_alpha = std::exp(r.argmax(dim));
      out.loglik = r.value;
      out.converged = r.status == NelderMeadStatus::Converged;
      out.iterations = r.iterations;
      out.failed = !std::isfinite(r.value);
    } catch (const InvalidStartError&) {
      out.failed = true;
    }
  });
  return profile;
}

// Highest log-likelihood; ties go to the larger pi0.
inline const Pi0Profile* best_profile(const std::vector<Pi0Profile>& profile)
{
  const Pi0Profile* best = nullptr;
  for (const auto& p : profile) {
    if (p.failed)
      continue;
    if (!best || p.loglik > best->loglik || (p.loglik == best->loglik && p.pi0 > best->pi0))
      best = &p;
  }
  return best;
}

}  // namespace detail

/// Fits (nu, sigma2_alpha, pi0). See FitConfig for the knobs.
inline EnFit fit(std::span<const ProviderSummary> providers, const Family& family,
                 const FitConfig& config = {})
{
  validate(providers, family);
  const auto dim = providers.front().covariates.size();
  if (static_cast<Eigen::Index>(providers.size()) < dim + 2)
    throw ValidationError("fit: need at least P + 2 providers");
  if (config.pi0_grid.empty())
    throw ValidationError("fit: empty pi0 grid");
  for (double v : config.pi0_grid)
    if (!(v > 0.0 && v <= 1.0))
      throw ValidationError("fit: pi0 grid values must lie in (0, 1]");
  if (config.refit_intervals < 0)
    throw ValidationError("fit: refit_intervals must be nonnegative");

  EnFit out;
  out.naive_z = naive_z(providers, family);
  out.init = initialize(providers, family, config.huber);
  if (!out.init.converged)
    out.warnings.push_back("robust initialization reached the iteration limit");

  const bool robust = config.mode == FitMode::Robust;
  const std::vector<double> grid = robust ? config.pi0_grid : std::vector<double>{1.0};

  Eigen::VectorXd nu_start = out.init.nu0;
  double sigma2_start = out.init.sigma2_alpha0;
  InitEstimate interval_source = out.init;

  const int passes = robust ? config.refit_intervals + 1 : 1;
  for (int pass = 0; pass < passes; ++pass) {
    if (robust) {
      out.intervals = null_intervals(providers, family, interval_source,
                                     config.interval_multiplier);
    } else {
      out.intervals.assign(providers.size(), NullInterval{});
    }
    out.null_set = null_membership(out.naive_z, out.intervals);
    if (out.null_count() == 0)
      throw NoNullProvidersError("no provider's Z-score falls inside its null interval");

    const detail::EnObjective objective(providers, family, out.naive_z, out.intervals,
                                        out.null_set);
    out.profile = detail::profile_pi0(objective, grid, nu_start, sigma2_start, config);
    const Pi0Profile* best = detail::best_profile(out.profile);
    if (!best) {
      std::string msg = "all " + std::to_string(grid.size()) +
                        " pi0 optimizations failed; null set size " +
                        std::to_string(out.null_count()) + " of " +
                        std::to_string(providers.size());
      throw FitError(msg);
    }
    out.params = best->params;
    out.pi0 = best->pi0;
    out.loglik = best->loglik;
    out.converged = best->converged;

    nu_start = out.params.nu;
    sigma2_start = out.params.sigma2_alpha;
    interval_source.nu0 = out.params.nu;
    interval_source.sigma2_alpha0 = out.params.sigma2_alpha;
  }
  if (!out.converged)
    out.warnings.push_back("optimizer reached the iteration limit at the selected pi0");

  out.covariance = Eigen::MatrixXd::Constant(dim, dim, std::numeric_limits<double>::quiet_NaN());
  if (config.compute_covariance) {
    try {
      out.covariance = sandwich_covariance(providers, family, out.params, out.null_set);
    } catch (const Error& e) {
      out.warnings.push_back(std::string("covariance unavailable: ") + e.what());
    }
  }
  return out;
}

}  // namespace provconf
