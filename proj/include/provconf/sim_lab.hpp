#pragma once

// Synthetic provider datasets and replicate experiments: estimation bias
// under outlying providers, the correlated-random-effects design where the
// provider mean of a patient covariate acts as W, and single-target flagging
// rates.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "provconf/en_fit.hpp"
#include "provconf/error.hpp"
#include "provconf/parallel.hpp"
#include "provconf/pseudo_bayes.hpp"
#include "provconf/rng.hpp"
#include "provconf/summary_model.hpp"

namespace provconf {

/// Patient-level GLM design with W ~ N(0, I), alpha ~ N(0, sigma2_alpha) and
/// a fraction of outlying providers with gamma* = c + coupling * W_1.
struct SimScenario
{
  int n_providers = 200;
  int n_per_provider = 100;
  Family family = Family::poisson();
  Eigen::VectorXd nu = Eigen::VectorXd::Constant(1, 0.25);
  double sigma2_alpha = 0.1;
  double outlier_proportion = 0.0;
  double outlier_effect = 2.0;
  double outlier_w_coupling = 0.5;
  double mu_star = -0.125;  ///< with beta = 0.5 and X ~ N(0,1), E[exp(theta0)] = 1
  Eigen::VectorXd beta = Eigen::VectorXd::Constant(1, 0.5);
  /// Pins the first provider's first covariate and quality effect.
  std::optional<double> target_w;
  std::optional<double> target_gamma;
  std::uint64_t seed = 1;
};

/// Normal-outcome correlated random effects design: gamma* = xi * Xbar + tau
/// with tau contaminated by shifted outliers.
struct CreScenario
{
  int n_providers = 200;
  int n_per_provider = 100;
  double xi = 0.25;
  double sigma2_tau = 0.1;
  double sigma2_eps = 1.0;
  double contamination = 0.0;
  double outlier_shift = 5.0;  ///< outlier offset in units of sd(tau)
  double x_mean_mean = -0.4;
  double x_mean_variance = 0.25;
  double x_within_variance = 0.25;
  double mu_star = -6.0;
  double beta = 1.0;
  std::uint64_t seed = 1;
};

using AnyScenario = std::variant<SimScenario, CreScenario>;

struct SimTruth
{
  Eigen::VectorXd nu;
  double sigma2_alpha = 0.0;
  std::vector<double> gamma_star;
  std::vector<double> alpha;
  std::vector<bool> is_null;
};

struct SimDataset
{
  std::vector<ProviderSummary> providers;
  SimTruth truth;
  Family family = Family::poisson();
};

namespace detail {

inline void check_scenario(const SimScenario& s)
{
  if (s.n_providers < 2)
    throw ScenarioError("n_providers must be at least 2");
  if (s.n_per_provider < 1)
    throw ScenarioError("n_per_provider must be positive");
  if (!(s.outlier_proportion >= 0.0 && s.outlier_proportion < 1.0))
    throw ScenarioError("outlier_proportion must lie in [0, 1)");
  if (!(s.sigma2_alpha >= 0.0))
    throw ScenarioError("sigma2_alpha must be nonnegative");
  if (s.nu.size() < 1 && s.target_w)
    throw ScenarioError("target_w requires at least one covariate");
}

inline void check_scenario(const CreScenario& s)
{
  if (s.n_providers < 2)
    throw ScenarioError("n_providers must be at least 2");
  if (s.n_per_provider < 1)
    throw ScenarioError("n_per_provider must be positive");
  if (!(s.contamination >= 0.0 && s.contamination < 1.0))
    throw ScenarioError("contamination must lie in [0, 1)");
  if (!(s.sigma2_tau > 0.0) || !(s.sigma2_eps > 0.0) || !(s.x_within_variance > 0.0) ||
      !(s.x_mean_variance >= 0.0))
    throw ScenarioError("CRE variances must be positive");
}

// Marks `count` randomly chosen entries of `eligible` as selected.
inline std::vector<bool> choose_subset(const std::vector<std::size_t>& eligible, std::size_t count,
                                       std::size_t total, std::mt19937_64& rng)
{
  std::vector<std::size_t> pool = eligible;
  std::vector<bool> chosen(total, false);
  count = std::min(count, pool.size());
  for (std::size_t k = 0; k < count; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
    std::swap(pool[k], pool[pick(rng)]);
    chosen[pool[k]] = true;
  }
  return chosen;
}

}  // namespace detail

/// Draws one dataset. E and n~ use the true theta0 (correct patient-level adjustment).
inline SimDataset generate(const SimScenario& s, std::mt19937_64& rng)
{
  detail::check_scenario(s);
  const auto providers = static_cast<std::size_t>(s.n_providers);
  const auto dim = s.nu.size();
  std::normal_distribution<double> std_normal(0.0, 1.0);

  SimDataset data;
  data.family = s.family;
  data.truth.nu = s.nu;
  data.truth.sigma2_alpha = s.sigma2_alpha;
  data.truth.gamma_star.assign(providers, 0.0);
  data.truth.alpha.assign(providers, 0.0);
  data.truth.is_null.assign(providers, true);

  std::vector<Eigen::VectorXd> w(providers, Eigen::VectorXd(dim));
  for (auto& wi : w)
    for (Eigen::Index j = 0; j < dim; ++j)
      wi(j) = std_normal(rng);
  if (s.target_w)
    w[0](0) = *s.target_w;

  const double sd_alpha = std::sqrt(s.sigma2_alpha);
  for (auto& a : data.truth.alpha)
    a = sd_alpha * std_normal(rng);

  std::vector<std::size_t> eligible;
  for (std::size_t i = s.target_gamma ? 1 : 0; i < providers; ++i)
    eligible.push_back(i);
  const auto n_outliers =
      static_cast<std::size_t>(std::llround(s.outlier_proportion * static_cast<double>(eligible.size())));
  const auto outlier = detail::choose_subset(eligible, n_outliers, providers, rng);
  for (std::size_t i = 0; i < providers; ++i) {
    if (outlier[i]) {
      const double w1 = dim > 0 ? w[i](0) : 0.0;
      data.truth.gamma_star[i] = s.outlier_effect + s.outlier_w_coupling * w1;
      data.truth.is_null[i] = false;
    }
  }
  if (s.target_gamma) {
    data.truth.gamma_star[0] = *s.target_gamma;
    data.truth.is_null[0] = *s.target_gamma == 0.0;
  }

  const auto q = s.beta.size();
  Eigen::VectorXd x(q);
  data.providers.resize(providers);
  for (std::size_t i = 0; i < providers; ++i) {
    const double shift = data.truth.gamma_star[i] + (dim > 0 ? w[i].dot(s.nu) : 0.0) +
                         data.truth.alpha[i];
    double observed = 0.0, expected = 0.0, info = 0.0, b3 = 0.0;
    for (int j = 0; j < s.n_per_provider; ++j) {
      for (Eigen::Index k = 0; k < q; ++k)
        x(k) = std_normal(rng);
      const double theta0 = s.mu_star + (q > 0 ? x.dot(s.beta) : 0.0);
      const double theta = theta0 + shift;
      switch (s.family.kind()) {
        case FamilyKind::Normal: {
          observed += theta + std::sqrt(s.family.dispersion()) * std_normal(rng);
          expected += theta0;
          info += 1.0;
          break;
        }
        case FamilyKind::Poisson:
        case FamilyKind::QuasiPoisson:
        case FamilyKind::ExpFamilyApprox: {
          if (theta > 30.0)
            throw ScenarioError("linear predictor exceeds 30; Poisson rate would overflow");
          const double psi =
              s.family.kind() == FamilyKind::QuasiPoisson ? s.family.dispersion() : 1.0;
          // Quasi-Poisson draws psi * Poisson(mu / psi): mean mu, variance psi * mu.
          std::poisson_distribution<long long> pois(std::exp(theta) / psi);
          observed += psi * static_cast<double>(pois(rng));
          const double mu0 = std::exp(theta0);
          expected += mu0;
          info += mu0;
          b3 += mu0;
          break;
        }
      }
    }
    auto& p = data.providers[i];
    p.id = "P" + std::to_string(i + 1);
    p.observed = observed;
    p.expected = expected;
    p.effective_size = info;
    p.covariates = w[i];
    p.n_patients = static_cast<double>(s.n_per_provider);
    if (s.family.kind() == FamilyKind::ExpFamilyApprox)
      p.b3_sum = b3;
  }
  return data;
}

inline SimDataset generate(const SimScenario& s)
{
  auto rng = make_stream(s.seed, 0);
  return generate(s, rng);
}

/// CRE dataset with W_i = Xbar_i - mean(Xbar). The expected counts use the
/// population norm mu* + xi * mean(Xbar), so the centered W carries xi.
inline SimDataset generate_cre(const CreScenario& s, std::mt19937_64& rng)
{
  detail::check_scenario(s);
  const auto providers = static_cast<std::size_t>(s.n_providers);
  std::normal_distribution<double> std_normal(0.0, 1.0);
  const double sd_within = std::sqrt(s.x_within_variance);
  const double sd_mean = std::sqrt(s.x_mean_variance);
  const double sd_tau = std::sqrt(s.sigma2_tau);
  const double sd_eps = std::sqrt(s.sigma2_eps);

  SimDataset data;
  data.family = Family::normal(s.sigma2_eps);
  data.truth.nu = Eigen::VectorXd::Constant(1, s.xi);
  data.truth.sigma2_alpha = s.sigma2_tau;
  data.truth.gamma_star.assign(providers, 0.0);
  data.truth.alpha.assign(providers, 0.0);
  data.truth.is_null.assign(providers, true);

  std::vector<std::vector<double>> x(providers);
  std::vector<double> xbar(providers, 0.0);
  for (std::size_t i = 0; i < providers; ++i) {
    const double m = s.x_mean_mean + sd_mean * std_normal(rng);
    x[i].resize(static_cast<std::size_t>(s.n_per_provider));
    for (auto& v : x[i]) {
      v = m + sd_within * std_normal(rng);
      xbar[i] += v;
    }
    xbar[i] /= s.n_per_provider;
  }
  const double grand = std::accumulate(xbar.begin(), xbar.end(), 0.0) / static_cast<double>(providers);

  std::vector<std::size_t> all(providers);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto n_out =
      static_cast<std::size_t>(std::llround(s.contamination * static_cast<double>(providers)));
  const auto outlier = detail::choose_subset(all, n_out, providers, rng);
  std::bernoulli_distribution coin(0.5);

  data.providers.resize(providers);
  for (std::size_t i = 0; i < providers; ++i) {
    double tau = sd_tau * std_normal(rng);
    double shift = 0.0;
    if (outlier[i]) {
      shift = (coin(rng) ? 1.0 : -1.0) * s.outlier_shift * sd_tau;
      data.truth.is_null[i] = false;
    }
    data.truth.alpha[i] = tau;
    data.truth.gamma_star[i] = shift;

    double observed = 0.0, expected = 0.0;
    const double effect = s.xi * xbar[i] + tau + shift;
    for (double xij : x[i]) {
      const double theta0 = s.mu_star + s.xi * grand + s.beta * xij;
      const double theta = s.mu_star + s.beta * xij + effect;
      observed += theta + sd_eps * std_normal(rng);
      expected += theta0;
    }
    auto& p = data.providers[i];
    p.id = "P" + std::to_string(i + 1);
    p.observed = observed;
    p.expected = expected;
    p.effective_size = static_cast<double>(s.n_per_provider);
    p.n_patients = static_cast<double>(s.n_per_provider);
    p.covariates = Eigen::VectorXd::Constant(1, xbar[i] - grand);
  }
  return data;
}

inline SimDataset generate_cre(const CreScenario& s)
{
  auto rng = make_stream(s.seed, 0);
  return generate_cre(s, rng);
}

// ---------------------------------------------------------------------------
// Replicates

struct RunOptions
{
  int n_reps = 100;
  bool fit_baseline = true;  ///< also fit the normal-MLE comparator
  bool flag_target = true;   ///< flag provider 1 with all four methods (count families)
  double level = 0.05;
  double prior_variance = 1.0;
  QuadratureOptions quadrature;
  FitConfig fit;
  unsigned threads = 1;
  double max_failure_rate = 0.10;
};

struct EstimateRecord
{
  bool ok = false;
  double nu_hat = 0.0;  ///< first component
  double sigma2_hat = 0.0;
  double pi0 = 1.0;
  double nu_se = 0.0;
  bool covered = false;  ///< 95% Wald interval covers the true nu_1
};

inline constexpr std::array<FlagMethod, 4> kFlagMethods = {
    FlagMethod::NaiveFrequentist, FlagMethod::AdjustedFrequentist, FlagMethod::NaiveBayes,
    FlagMethod::AdjustedBayes};

struct ReplicateRecord
{
  bool failed = false;
  std::string failure;
  bool target_null = true;
  double target_gamma = 0.0;
  EstimateRecord robust;
  EstimateRecord baseline;
  bool flagged_valid = false;
  std::array<Flag, 4> flags{Flag::Null, Flag::Null, Flag::Null, Flag::Null};
};

struct MethodMetrics
{
  std::string method;
  std::size_t n = 0;
  double bias_nu = 0.0, se_bias_nu = 0.0;
  double bias_sigma2_alpha = 0.0, se_bias_sigma2_alpha = 0.0;
  double mse_nu = 0.0, se_mse_nu = 0.0;
  double coverage = 0.0, se_coverage = 0.0;
  std::size_t n_null_target = 0, n_outlier_target = 0;
  double ffp = 0.0, se_ffp = 0.0;
  double tfp = 0.0, se_tfp = 0.0;
  bool is_estimator = false;
};

struct ReplicateMetrics
{
  std::size_t n_reps = 0;
  std::size_t n_failed = 0;
  // Headline numbers: robust estimator and adjusted Pseudo-Bayesian flags.
  double bias_nu = 0.0;
  double bias_sigma2_alpha = 0.0;
  double mse_nu = 0.0;
  double ffp = 0.0;
  double tfp = 0.0;
  std::vector<MethodMetrics> methods;
  std::vector<ReplicateRecord> records;

  const MethodMetrics* find(std::string_view name) const
  {
    for (const auto& m : methods)
      if (m.method == name)
        return &m;
    return nullptr;
  }
};

namespace detail {

struct MeanSe
{
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSe mean_se(const std::vector<double>& v)
{
  MeanSe r;
  if (v.empty())
    return r;
  const double n = static_cast<double>(v.size());
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v)
      ss += (x - r.mean) * (x - r.mean);
    r.se = std::sqrt(ss / (n - 1.0) / n);
  }
  return r;
}

inline EstimateRecord summarize_fit(const EnFit& f, const SimTruth& truth)
{
  EstimateRecord e;
  e.ok = true;
  e.nu_hat = f.params.nu.size() > 0 ? f.params.nu(0) : 0.0;
  e.sigma2_hat = f.params.sigma2_alpha;
  e.pi0 = f.pi0;
  if (f.covariance.size() > 0 && std::isfinite(f.covariance(0, 0)) && f.covariance(0, 0) >= 0.0) {
    e.nu_se = std::sqrt(f.covariance(0, 0));
    const double truth_nu = truth.nu.size() > 0 ? truth.nu(0) : 0.0;
    e.covered = std::abs(e.nu_hat - truth_nu) <= 1.959963984540054 * e.nu_se;
  }
  return e;
}

inline bool counts_family(const Family& f)
{
  return f.kind() == FamilyKind::Poisson || f.kind() == FamilyKind::QuasiPoisson;
}

inline ReplicateRecord run_one(const AnyScenario& scenario, const RunOptions& opt,
                               std::uint64_t seed, std::uint64_t rep)
{
  ReplicateRecord rec;
  auto rng = make_stream(seed, rep);
  try {
    const SimDataset data = std::visit(
        [&](const auto& s) {
          if constexpr (std::is_same_v<std::decay_t<decltype(s)>, SimScenario>)
            return generate(s, rng);
          else
            return generate_cre(s, rng);
        },
        scenario);
    rec.target_null = data.truth.is_null[0];
    rec.target_gamma = data.truth.gamma_star[0];

    FitConfig cfg = opt.fit;
    cfg.threads = 1;
    cfg.mode = FitMode::Robust;
    const EnFit robust = fit(data.providers, data.family, cfg);
    rec.robust = summarize_fit(robust, data.truth);

    if (opt.fit_baseline) {
      cfg.mode = FitMode::NormalMle;
      const EnFit base = fit(data.providers, data.family, cfg);
      rec.baseline = summarize_fit(base, data.truth);
    }

    if (opt.flag_target && counts_family(data.family)) {
      const auto& target = data.providers[0];
      rec.flags[0] =
          flag_frequentist(target.id, naive_z(target, data.family), kFlagMethods[0], opt.level).flag;
      rec.flags[1] = flag_frequentist(target.id, corrected_z(target, data.family, robust.params),
                                      kFlagMethods[1], opt.level)
                         .flag;
      rec.flags[2] =
          flag_bayesian(target.id, original_posterior(target), kFlagMethods[2], opt.level).flag;
      if (!robust.covariance.allFinite())
        throw FitError("sandwich covariance unavailable for the adjusted posterior");
      const auto dim = robust.params.nu.size();
      const Eigen::MatrixXd prior = opt.prior_variance * Eigen::MatrixXd::Identity(dim, dim);
      const auto nu_post = nu_posterior(robust.params.nu, robust.covariance, prior);
      const auto lambda = lambda_posterior(target.covariates, nu_post, robust.params.sigma2_alpha);
      rec.flags[3] = flag_bayesian(target.id, corrected_posterior(target, lambda, opt.quadrature),
                                   kFlagMethods[3], opt.level)
                         .flag;
      rec.flagged_valid = true;
    }
  } catch (const Error& e) {
    rec.failed = true;
    rec.failure = e.what();
  }
  return rec;
}

inline MethodMetrics estimator_metrics(std::string name, const std::vector<ReplicateRecord>& recs,
                                       bool baseline, const SimTruth& truth_template)
{
  MethodMetrics m;
  m.method = std::move(name);
  m.is_estimator = true;
  const double nu_true = truth_template.nu.size() > 0 ? truth_template.nu(0) : 0.0;
  std::vector<double> err, err2, err_s, cover;
  for (const auto& r : recs) {
    if (r.failed)
      continue;
    const auto& e = baseline ? r.baseline : r.robust;
    if (!e.ok)
      continue;
    err.push_back(e.nu_hat - nu_true);
    err2.push_back((e.nu_hat - nu_true) * (e.nu_hat - nu_true));
    err_s.push_back(e.sigma2_hat - truth_template.sigma2_alpha);
    cover.push_back(e.covered ? 1.0 : 0.0);
  }
  m.n = err.size();
  const auto b = mean_se(err), s = mean_se(err_s), q = mean_se(err2), c = mean_se(cover);
  m.bias_nu = b.mean;
  m.se_bias_nu = b.se;
  m.bias_sigma2_alpha = s.mean;
  m.se_bias_sigma2_alpha = s.se;
  m.mse_nu = q.mean;
  m.se_mse_nu = q.se;
  m.coverage = c.mean;
  m.se_coverage = c.se;
  return m;
}

inline MethodMetrics flag_metrics(std::size_t index, const std::vector<ReplicateRecord>& recs)
{
  MethodMetrics m;
  m.method = std::string(to_string(kFlagMethods[index]));
  std::size_t false_flags = 0, true_flags = 0;
  for (const auto& r : recs) {
    if (r.failed || !r.flagged_valid)
      continue;
    ++m.n;
    const Flag f = r.flags[index];
    if (r.target_null) {
      ++m.n_null_target;
      false_flags += f != Flag::Null ? 1 : 0;
    } else {
      ++m.n_outlier_target;
      const Flag correct = r.target_gamma < 0.0 ? Flag::Low : Flag::High;
      true_flags += f == correct ? 1 : 0;
    }
  }
  // No targets of a kind leaves that rate undefined (NaN, written as NA).
  auto rate = [](std::size_t k, std::size_t n, double& p, double& se) {
    p = n ? static_cast<double>(k) / static_cast<double>(n) : stats::kNaN;
    se = n ? std::sqrt(p * (1.0 - p) / static_cast<double>(n)) : stats::kNaN;
  };
  rate(false_flags, m.n_null_target, m.ffp, m.se_ffp);
  rate(true_flags, m.n_outlier_target, m.tfp, m.se_tfp);
  return m;
}

inline SimTruth scenario_truth(const AnyScenario& scenario)
{
  SimTruth t;
  if (const auto* s = std::get_if<SimScenario>(&scenario)) {
    t.nu = s->nu;
    t.sigma2_alpha = s->sigma2_alpha;
  } else {
    const auto& c = std::get<CreScenario>(scenario);
    t.nu = Eigen::VectorXd::Constant(1, c.xi);
    t.sigma2_alpha = c.sigma2_tau;
  }
  return t;
}

}  // namespace detail

/// Runs `opt.n_reps` independent replicates. Replicate r draws from substream
/// r of the scenario seed, so results do not depend on the thread count.
inline ReplicateMetrics run_replicates(const AnyScenario& scenario, const RunOptions& opt)
{
  if (opt.n_reps < 1)
    throw ScenarioError("n_reps must be at least 1");
  const std::uint64_t seed =
      std::visit([](const auto& s) { return static_cast<std::uint64_t>(s.seed); }, scenario);

  ReplicateMetrics out;
  out.n_reps = static_cast<std::size_t>(opt.n_reps);
  out.records.resize(out.n_reps);
  parallel_for(out.n_reps, opt.threads, [&](std::size_t r) {
    out.records[r] = detail::run_one(scenario, opt, seed, r);
  });

  for (const auto& r : out.records)
    out.n_failed += r.failed ? 1 : 0;
  if (static_cast<double>(out.n_failed) > opt.max_failure_rate * static_cast<double>(out.n_reps)) {
    std::string first;
    for (const auto& r : out.records)
      if (r.failed) {
        first = r.failure;
        break;
      }
    throw ScenarioError(std::to_string(out.n_failed) + " of " + std::to_string(out.n_reps) +
                        " replicates failed; first failure: " + first);
  }

  const SimTruth truth = detail::scenario_truth(scenario);
  out.methods.push_back(detail::estimator_metrics("rpp", out.records, false, truth));
  if (opt.fit_baseline)
    out.methods.push_back(detail::estimator_metrics("normal_mle", out.records, true, truth));
  const bool any_flags = std::any_of(out.records.begin(), out.records.end(),
                                     [](const ReplicateRecord& r) { return r.flagged_valid; });
  if (any_flags)
    for (std::size_t k = 0; k < kFlagMethods.size(); ++k)
      out.methods.push_back(detail::flag_metrics(k, out.records));

  const auto& rpp = out.methods.front();
  out.bias_nu = rpp.bias_nu;
  out.bias_sigma2_alpha = rpp.bias_sigma2_alpha;
  out.mse_nu = rpp.mse_nu;
  if (const auto* adj = out.find("adj_bayes")) {
    out.ffp = adj->ffp;
    out.tfp = adj->tfp;
  }
  return out;
}

}  // namespace provconf
