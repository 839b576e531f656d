#pragma once

// Measure-ratio posteriors: the Gamma posterior of the unadjusted ratio R,
// and the Gamma-Lognormal mixture posterior of the corrected ratio R* that
// integrates over Lambda = exp(W'nu + alpha). Credible intervals and flag
// rules for both, plus the Frequentist Z-score rules.

#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "provconf/error.hpp"
#include "provconf/stats.hpp"
#include "provconf/summary_model.hpp"

namespace provconf {

struct NuPosterior
{
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  Eigen::MatrixXd prior_covariance;
};

/// Normal-normal update of nu given nu_hat ~ MVN(nu, sigma_nu_hat) and the
/// prior MVN(0, sigma_prior):
///   mean = Sp (Sp + Sh)^-1 nu_hat,   cov = Sp (Sp + Sh)^-1 Sh.
/// The covariance form equals (Sp^-1 + Sh^-1)^-1 when both are invertible and
/// remains defined when the prior is singular.
inline NuPosterior nu_posterior(const Eigen::VectorXd& nu_hat, const Eigen::MatrixXd& sigma_nu_hat,
                                const Eigen::MatrixXd& sigma_prior)
{
  const auto p = nu_hat.size();
  if (sigma_nu_hat.rows() != p || sigma_nu_hat.cols() != p || sigma_prior.rows() != p ||
      sigma_prior.cols() != p)
    throw ValidationError("nu_posterior: dimension mismatch");
  if (!nu_hat.allFinite() || !sigma_nu_hat.allFinite() || !sigma_prior.allFinite())
    throw ValidationError("nu_posterior: non-finite input");

  NuPosterior post;
  post.prior_covariance = sigma_prior;
  if (p == 0) {
    post.mean = Eigen::VectorXd(0);
    post.covariance = Eigen::MatrixXd(0, 0);
    return post;
  }
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(sigma_prior + sigma_nu_hat);
  if (!lu.isInvertible())
    throw SingularDesignError("nu_posterior: prior plus sampling covariance is singular");
  const Eigen::MatrixXd gain = sigma_prior * lu.inverse();
  post.mean = gain * nu_hat;
  const Eigen::MatrixXd cov = gain * sigma_nu_hat;
  post.covariance = 0.5 * (cov + cov.transpose());
  return post;
}

struct LambdaPosterior
{
  double log_mean = 0.0;
  double log_variance = 0.0;
};

/// Lognormal(W'm_post, W' S_post W + sigma2_alpha), with sigma2_alpha taken as known.
inline LambdaPosterior lambda_posterior(const Eigen::VectorXd& w, const NuPosterior& nu,
                                        double sigma2_alpha)
{
  if (w.size() != nu.mean.size())
    throw ValidationError("lambda_posterior: covariate dimension mismatch");
  if (!(sigma2_alpha >= 0.0))
    throw ValidationError("lambda_posterior: sigma2_alpha must be nonnegative");
  LambdaPosterior lp;
  lp.log_mean = w.dot(nu.mean);
  lp.log_variance = std::max(0.0, w.dot(nu.covariance * w)) + sigma2_alpha;
  return lp;
}

/// Gamma(shape, rate) prior on the measure ratio.
struct GammaPrior
{
  double shape = 2.0;
  double rate = 2.0;
};

struct QuadratureOptions
{
  int nodes = 64;
  bool adaptive = true;      ///< double the rule until a probe quantile is stable
  double tolerance = 1e-4;   ///< allowed change in the probe quantile per doubling
  int max_nodes = 512;
  double probe = 0.5;
};

enum class PosteriorKind { OriginalGamma, CorrectedMixture };

/// How the corrected posterior integrates over the two sources of spread.
///  LogLambda: R* = mixture of Gamma(s, E lambda_k + b0) over Gauss-Hermite
///             nodes in log lambda.
///  LogGamma:  R* = G / (E Lambda + b0) with G ~ Gamma(s, 1) integrated by
///             Gauss-Hermite in log G and Lambda handled in closed form. Used
///             when the Gamma factor is much narrower than the lognormal, where
///             nodes in log lambda would alias the narrow components.
enum class QuadratureScheme { LogLambda, LogGamma };

/// Posterior of a measure ratio. The original posterior is a single Gamma;
/// the corrected posterior is a quadrature mixture (see QuadratureScheme).
class PosteriorR
{
 public:
  struct Component
  {
    double weight;
    double rate;  ///< LogLambda: Gamma rate. LogGamma: the node value g.
  };

  /// Gamma(O + a0, E + b0).
  static PosteriorR original(const ProviderSummary& provider, const GammaPrior& prior = {})
  {
    check(provider, prior);
    PosteriorR r;
    r.kind_ = PosteriorKind::OriginalGamma;
    r.shape_ = provider.observed + prior.shape;
    r.rate_base_ = provider.expected + prior.rate;
    r.prior_rate_ = prior.rate;
    r.components_ = {{1.0, r.rate_base_}};
    r.nodes_ = 1;
    return r;
  }

  /// Mixture over lambda of Gamma(O + a0, E lambda + b0), with log lambda
  /// normal and the integral done by Gauss-Hermite quadrature in log lambda.
  static PosteriorR corrected(const ProviderSummary& provider, const LambdaPosterior& lambda,
                              const QuadratureOptions& quad = {}, const GammaPrior& prior = {})
  {
    check(provider, prior);
    if (quad.nodes < 8)
      throw ValidationError("corrected posterior needs at least 8 quadrature nodes");
    if (!(lambda.log_variance >= 0.0) || !std::isfinite(lambda.log_mean))
      throw ValidationError("invalid lambda posterior");

    PosteriorR current = build(provider, lambda, quad.nodes, prior);
    if (!quad.adaptive)
      return current;

    double probe = current.quantile(quad.probe);
    for (int n = quad.nodes; n < quad.max_nodes; n *= 2) {
      PosteriorR refined = build(provider, lambda, 2 * n, prior);
      const double refined_probe = refined.quantile(quad.probe);
      if (std::abs(refined_probe - probe) <= quad.tolerance)
        return current;
      current = std::move(refined);
      probe = refined_probe;
    }
    current.quadrature_converged_ = false;
    return current;
  }

  PosteriorKind kind() const noexcept { return kind_; }
  double shape() const noexcept { return shape_; }
  /// E + b0 for the original posterior, E for the mixture.
  double rate_base() const noexcept { return rate_base_; }
  std::optional<LambdaPosterior> lambda() const { return lambda_; }
  int quadrature_nodes() const noexcept { return nodes_; }
  bool quadrature_converged() const noexcept { return quadrature_converged_; }
  QuadratureScheme scheme() const noexcept { return scheme_; }
  const std::vector<Component>& components() const noexcept { return components_; }

  double pdf(double r) const
  {
    if (r <= 0.0)
      return 0.0;
    double sum = 0.0;
    if (scheme_ == QuadratureScheme::LogLambda) {
      for (const auto& c : components_)
        sum += c.weight * std::exp(stats::gamma_log_pdf(r, shape_, c.rate));
      return sum;
    }
    // d/dr P(Lambda >= t(r)) with t = (g / r - b0) / E.
    const double sd = std::sqrt(lambda_->log_variance);
    for (const auto& c : components_) {
      const double t = (c.rate / r - prior_rate_) / rate_base_;
      if (t <= 0.0)
        continue;
      const double u = (std::log(t) - lambda_->log_mean) / sd;
      sum += c.weight * stats::normal_pdf(u) / (t * sd) * c.rate / (rate_base_ * r * r);
    }
    return sum;
  }

  double cdf(double r) const
  {
    if (r <= 0.0)
      return 0.0;
    double sum = 0.0;
    if (scheme_ == QuadratureScheme::LogLambda) {
      for (const auto& c : components_)
        sum += c.weight * stats::gamma_cdf(r, shape_, c.rate);
    } else {
      const double sd = std::sqrt(lambda_->log_variance);
      for (const auto& c : components_) {
        const double t = (c.rate / r - prior_rate_) / rate_base_;
        sum += c.weight * (t <= 0.0 ? 1.0 : stats::normal_sf((std::log(t) - lambda_->log_mean) / sd));
      }
    }
    return std::clamp(sum, 0.0, 1.0);
  }

  double mean() const
  {
    double sum = 0.0;
    if (scheme_ == QuadratureScheme::LogLambda) {
      for (const auto& c : components_)
        sum += c.weight * shape_ / c.rate;
      return sum;
    }
    // E[G] E[1 / (E Lambda + b0)]; the second factor is smooth in log lambda.
    const auto rule = stats::gauss_hermite(64);
    const double spread = std::sqrt(2.0 * lambda_->log_variance);
    for (std::size_t k = 0; k < rule.nodes.size(); ++k)
      sum += rule.weights[k] /
             (rate_base_ * std::exp(lambda_->log_mean + spread * rule.nodes[k]) + prior_rate_);
    return shape_ * sum / std::sqrt(std::numbers::pi);
  }

  /// Solves cdf(q) = p by bisection on log q, bracketed by the quantiles of
  /// the components with the largest and smallest rate.
  double quantile(double p) const
  {
    if (!(p > 0.0 && p < 1.0))
      throw ValidationError("quantile: p must lie in (0, 1)");
    const auto [min_it, max_it] = std::minmax_element(
        components_.begin(), components_.end(),
        [](const Component& a, const Component& b) { return a.rate < b.rate; });
    double lo = 0.0, hi = 0.0;
    if (scheme_ == QuadratureScheme::LogLambda) {
      lo = stats::gamma_quantile(p, shape_, max_it->rate);
      hi = stats::gamma_quantile(p, shape_, min_it->rate);
    } else {
      // Component g has quantile g / (E lambda_{1-p} + b0).
      const double lam = std::exp(lambda_->log_mean + std::sqrt(lambda_->log_variance) *
                                                          stats::normal_quantile(1.0 - p));
      lo = min_it->rate / (rate_base_ * lam + prior_rate_);
      hi = max_it->rate / (rate_base_ * lam + prior_rate_);
    }
    if (components_.size() == 1 || hi <= lo * (1.0 + 1e-12))
      return lo;
    // Guard the bracket against rounding in the component quantiles.
    lo *= 1.0 - 1e-9;
    hi *= 1.0 + 1e-9;
    if (!(cdf(lo) <= p && cdf(hi) >= p))
      throw NumericalError("posterior quantile bracketing failed at p = " + std::to_string(p) +
                           " over [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    for (int iter = 0; iter < 200 && hi > lo * (1.0 + 1e-10); ++iter) {
      const double mid = std::sqrt(lo * hi);
      if (cdf(mid) < p)
        lo = mid;
      else
        hi = mid;
    }
    return std::sqrt(lo * hi);
  }

  std::pair<double, double> credible_interval(double level) const
  {
    if (!(level > 0.0 && level < 1.0))
      throw ValidationError("credible_interval: level must lie in (0, 1)");
    return {quantile(0.5 * level), quantile(1.0 - 0.5 * level)};
  }

  double median() const { return quantile(0.5); }

 private:
  static void check(const ProviderSummary& provider, const GammaPrior& prior)
  {
    if (!(provider.observed >= 0.0) || !std::isfinite(provider.observed))
      throw ValidationError("provider '" + provider.id + "': observed must be nonnegative");
    if (!(provider.expected >= 0.0) || !std::isfinite(provider.expected))
      throw ValidationError("provider '" + provider.id + "': expected must be nonnegative");
    if (!(prior.shape > 0.0 && prior.rate > 0.0))
      throw ValidationError("Gamma prior shape and rate must be positive");
  }

  static PosteriorR build(const ProviderSummary& provider, const LambdaPosterior& lambda,
                          int nodes, const GammaPrior& prior)
  {
    const auto rule = stats::gauss_hermite(nodes);
    PosteriorR r;
    r.kind_ = PosteriorKind::CorrectedMixture;
    r.shape_ = provider.observed + prior.shape;
    r.rate_base_ = provider.expected;
    r.prior_rate_ = prior.rate;
    r.lambda_ = lambda;
    r.nodes_ = nodes;
    r.components_.reserve(static_cast<std::size_t>(nodes));
    // Relative width of the Gamma factor is 1/sqrt(shape); of Lambda, sqrt(v).
    const bool condition_on_gamma =
        provider.expected > 0.0 && lambda.log_variance * r.shape_ > 1.0 && r.shape_ >= 3.0;
    if (!condition_on_gamma) {
      r.scheme_ = QuadratureScheme::LogLambda;
      const double spread = std::sqrt(2.0 * lambda.log_variance);
      double total = 0.0;
      for (double w : rule.weights)
        total += w;
      for (int k = 0; k < nodes; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        const double lam = std::exp(lambda.log_mean + spread * rule.nodes[ks]);
        r.components_.push_back({rule.weights[ks] / total, provider.expected * lam + prior.rate});
      }
      return r;
    }
    // y = log G has density exp(s y - e^y) / Gamma(s), mode log s, curvature -s.
    // Gauss-Hermite around that normal approximation, reweighted by the exact
    // density ratio.
    r.scheme_ = QuadratureScheme::LogGamma;
    const double s = r.shape_;
    const double scale = std::sqrt(2.0 / s);
    std::vector<double> log_w(static_cast<std::size_t>(nodes), -stats::kInf);
    double top = -stats::kInf;
    for (int k = 0; k < nodes; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      const double y = std::log(s) + scale * rule.nodes[ks];
      log_w[ks] = std::log(rule.scaled_weights[ks]) + s * y - std::exp(y);
      top = std::max(top, log_w[ks]);
    }
    double total = 0.0;
    for (double lw : log_w)
      total += std::exp(lw - top);
    for (int k = 0; k < nodes; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      const double w = std::exp(log_w[ks] - top) / total;
      if (w > 0.0)
        r.components_.push_back({w, std::exp(std::log(s) + scale * rule.nodes[ks])});
    }
    return r;
  }

  PosteriorKind kind_ = PosteriorKind::OriginalGamma;
  double shape_ = 1.0;
  double rate_base_ = 1.0;
  double prior_rate_ = 2.0;
  QuadratureScheme scheme_ = QuadratureScheme::LogLambda;
  std::optional<LambdaPosterior> lambda_;
  std::vector<Component> components_;
  int nodes_ = 1;
  bool quadrature_converged_ = true;
};

inline PosteriorR original_posterior(const ProviderSummary& provider, const GammaPrior& prior = {})
{
  return PosteriorR::original(provider, prior);
}

inline PosteriorR corrected_posterior(const ProviderSummary& provider,
                                      const LambdaPosterior& lambda,
                                      const QuadratureOptions& quad = {},
                                      const GammaPrior& prior = {})
{
  return PosteriorR::corrected(provider, lambda, quad, prior);
}

// ---------------------------------------------------------------------------
// Flagging

enum class FlagMethod { NaiveFrequentist, AdjustedFrequentist, NaiveBayes, AdjustedBayes };
enum class Flag { Low, Null, High };

inline std::string_view to_string(FlagMethod m)
{
  switch (m) {
    case FlagMethod::NaiveFrequentist: return "naive_freq";
    case FlagMethod::AdjustedFrequentist: return "adj_freq";
    case FlagMethod::NaiveBayes: return "naive_bayes";
    case FlagMethod::AdjustedBayes: return "adj_bayes";
  }
  return "unknown";
}

inline std::string_view to_string(Flag f)
{
  switch (f) {
    case Flag::Low: return "low";
    case Flag::Null: return "null";
    case Flag::High: return "high";
  }
  return "unknown";
}

struct FlagDecision
{
  std::string provider_id;
  FlagMethod method = FlagMethod::NaiveFrequentist;
  double statistic = 0.0;  ///< Z-score, or posterior median for Bayesian methods
  std::pair<double, double> interval{0.0, 0.0};
  Flag flag = Flag::Null;
};

inline bool is_bayesian(FlagMethod m)
{
  return m == FlagMethod::NaiveBayes || m == FlagMethod::AdjustedBayes;
}

/// Two-sided test of a (naive or corrected) Z-score at `level`.
inline FlagDecision flag_frequentist(std::string provider_id, double z, FlagMethod method,
                                     double level = 0.05)
{
  if (!(level > 0.0 && level < 1.0))
    throw ValidationError("flag level must lie in (0, 1)");
  if (is_bayesian(method))
    throw ValidationError("flag_frequentist called with a Bayesian method");
  const double threshold = stats::normal_quantile(1.0 - 0.5 * level);
  FlagDecision d;
  d.provider_id = std::move(provider_id);
  d.method = method;
  d.statistic = z;
  d.interval = {-threshold, threshold};
  d.flag = z < -threshold ? Flag::Low : (z > threshold ? Flag::High : Flag::Null);
  return d;
}

/// Flags when the equal-tailed credible interval excludes 1.
inline FlagDecision flag_bayesian(std::string provider_id, const PosteriorR& posterior,
                                  FlagMethod method, double level = 0.05)
{
  if (!(level > 0.0 && level < 1.0))
    throw ValidationError("flag level must lie in (0, 1)");
  if (!is_bayesian(method))
    throw ValidationError("flag_bayesian called with a Frequentist method");
  FlagDecision d;
  d.provider_id = std::move(provider_id);
  d.method = method;
  d.statistic = posterior.median();
  d.interval = posterior.credible_interval(level);
  d.flag = d.interval.second < 1.0 ? Flag::Low
                                   : (d.interval.first > 1.0 ? Flag::High : Flag::Null);
  return d;
}

}  // namespace provconf
