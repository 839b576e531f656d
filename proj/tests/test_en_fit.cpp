#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "provconf/en_fit.hpp"
#include "provconf/rng.hpp"
#include "provconf/sim_lab.hpp"

using namespace provconf;

namespace {

ProviderSummary unit_provider(double z, double w = 0.0)
{
  ProviderSummary p;
  p.id = "u";
  p.expected = 100;
  p.effective_size = 100;
  p.observed = 100 + 10 * z;
  p.covariates = Eigen::VectorXd::Constant(1, w);
  return p;
}

InitEstimate zero_init()
{
  InitEstimate init;
  init.nu0 = Eigen::VectorXd::Zero(1);
  return init;
}

ConfoundingParams zero_params()
{
  return {Eigen::VectorXd::Zero(1), 0.0};
}

SimDataset dataset(std::uint64_t seed, int n = 200, double outliers = 0.0)
{
  SimScenario s;
  s.seed = seed;
  s.n_providers = n;
  s.outlier_proportion = outliers;
  return generate(s);
}

}  // namespace

TEST(NullIntervals, StandardBandAtZeroEstimates)
{
  const std::vector<ProviderSummary> ps{unit_provider(0.3, 1.0), unit_provider(-2, -0.5)};
  for (const auto& iv : null_intervals(ps, Family::poisson(), zero_init())) {
    EXPECT_DOUBLE_EQ(iv.lower, -1.96);
    EXPECT_DOUBLE_EQ(iv.upper, 1.96);
  }
}

TEST(NullIntervals, NormalSubstitution)
{
  auto p = unit_provider(0, 1.0);
  p.n_patients = 100;
  InitEstimate init = zero_init();
  init.nu0(0) = 0.25;
  init.sigma2_alpha0 = 0.1;
  const auto iv = null_intervals(std::vector{p}, Family::normal(1.0), init).front();
  EXPECT_NEAR(iv.lower, 2.5 - 1.96 * std::sqrt(11.0), 1e-14);
  EXPECT_NEAR(iv.upper, 2.5 + 1.96 * std::sqrt(11.0), 1e-14);
}

TEST(NullIntervals, WidthIncreasesWithEffectiveSize)
{
  InitEstimate init = zero_init();
  init.nu0(0) = 0.2;
  init.sigma2_alpha0 = 0.05;
  std::vector<ProviderSummary> ps;
  for (double n : {5.0, 20.0, 80.0, 320.0}) {
    auto p = unit_provider(0, 0.7);
    p.effective_size = n;
    p.expected = n;
    ps.push_back(p);
  }
  const auto iv = null_intervals(ps, Family::poisson(), init);
  for (std::size_t i = 1; i < iv.size(); ++i)
    EXPECT_GT(iv[i].upper - iv[i].lower, iv[i - 1].upper - iv[i - 1].lower);
}

TEST(LogLikelihood, SingleProviderExamples)
{
  const std::vector<ProviderSummary> one{unit_provider(0.0)};
  const std::vector<NullInterval> band{{-1.96, 1.96}};
  EXPECT_NEAR(log_likelihood(one, Family::poisson(), zero_params(), 1.0, band, {true}),
              -0.9189385332046727, 1e-12);
  // Q = Phi(1.96) - Phi(-1.96) = 0.9500042097035591
  EXPECT_NEAR(log_likelihood(one, Family::poisson(), zero_params(), 1.0, band, {false}),
              std::log(1 - 0.9500042097035591), 1e-12);
}

TEST(LogLikelihood, MixedSetMatchesTermByTermOracle)
{
  const std::vector<ProviderSummary> two{unit_provider(0.0), unit_provider(2.5)};
  const std::vector<NullInterval> band{{-1.96, 1.96}, {-1.96, 1.96}};
  const std::vector<bool> s0{true, false};
  const double got = log_likelihood(two, Family::poisson(), zero_params(), 0.5, band, s0);
  EXPECT_NEAR(got, std::log(0.5) - 0.9189385332046727 + std::log(1 - 0.5 * 0.9500042097035591),
              1e-12);
  EXPECT_NEAR(got,
              oracle::log_likelihood(two, Family::poisson(), Eigen::VectorXd::Zero(1), 0, 0.5, band,
                                     s0),
              1e-12);
}

TEST(LogLikelihood, AgreesWithOracleOnSimulatedData)
{
  const auto data = dataset(71, 60, 0.1);
  const Family f = data.family;
  const auto init = initialize(data.providers, f);
  const auto iv = null_intervals(data.providers, f, init);
  const auto s0 = null_membership(naive_z(data.providers, f), iv);
  for (double nu : {-0.3, 0.1, 0.6})
    for (double s2 : {1e-4, 0.05, 0.4})
      for (double pi0 : {0.1, 0.7, 1.0}) {
        const ConfoundingParams params{Eigen::VectorXd::Constant(1, nu), s2};
        const double got = log_likelihood(data.providers, f, params, pi0, iv, s0);
        const double ref =
            oracle::log_likelihood(data.providers, f, params.nu, s2, pi0, iv, s0);
        if (std::isinf(ref))
          EXPECT_EQ(got, ref);
        else
          EXPECT_NEAR(got, ref, 1e-10 * std::abs(ref));
      }
}

TEST(LogLikelihood, InvalidRegionReturnsMinusInfinity)
{
  auto p = unit_provider(0.0, 1.0);
  p.b3_sum = 100;
  const std::vector<ProviderSummary> one{p};
  const std::vector<NullInterval> band{{-1.96, 1.96}};
  const ConfoundingParams bad{Eigen::VectorXd::Constant(1, -5.0), 0.0};
  EXPECT_EQ(log_likelihood(one, Family::exp_family(1.0), bad, 1.0, band, {true}), -stats::kInf);
  EXPECT_THROW(log_likelihood(one, Family::poisson(), zero_params(), 0.0, band, {true}),
               ValidationError);
}

TEST(LogLikelihood, DecreasesAsNullProviderMovesAway)
{
  const std::vector<NullInterval> band{{-1.96, 1.96}};
  double previous = INFINITY;
  for (double z : {0.0, 0.4, 0.9, 1.5, 1.9}) {
    const std::vector<ProviderSummary> one{unit_provider(z)};
    const double ll = log_likelihood(one, Family::poisson(), zero_params(), 0.8, band, {true});
    EXPECT_LE(ll, previous);
    previous = ll;
  }
}

TEST(Sandwich, IdentityAndScalarCases)
{
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(3, 3);
  EXPECT_LT((sandwich(eye, Eigen::VectorXd::Ones(3)) - eye).cwiseAbs().maxCoeff(), 1e-15);

  const Eigen::VectorXd w = (Eigen::VectorXd(4) << 1, -2, 0.5, 3).finished();
  EXPECT_NEAR(sandwich(w, Eigen::VectorXd::Ones(4))(0, 0), 1.0 / w.squaredNorm(), 1e-15);

  // Through the provider interface: n~ = a = 1, nu = 0, sigma2 = 0 gives Omega = I.
  std::vector<ProviderSummary> ps;
  for (double wi : w) {
    ProviderSummary p;
    p.id = "s";
    p.observed = 1;
    p.expected = 1;
    p.effective_size = 1;
    p.covariates = Eigen::VectorXd::Constant(1, wi);
    ps.push_back(p);
  }
  ps.push_back(ps.front());
  const std::vector<bool> s0{true, true, true, true, false};
  EXPECT_NEAR(sandwich_covariance(ps, Family::poisson(), zero_params(), s0)(0, 0),
              1.0 / w.squaredNorm(), 1e-15);
}

TEST(Sandwich, SymmetricPositiveSemidefinite)
{
  SimScenario s;
  s.nu = Eigen::Vector3d(0.2, -0.1, 0.05);
  s.seed = 9;
  const auto data = generate(s);
  const auto f = fit(data.providers, data.family);
  const auto& c = f.covariance;
  ASSERT_EQ(c.rows(), 3);
  EXPECT_LT((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c);
  EXPECT_GE(eig.eigenvalues().minCoeff(), 0.0);
}

TEST(Sandwich, RankDeficientNullDesign)
{
  std::vector<ProviderSummary> ps{unit_provider(0, 1), unit_provider(0, 0), unit_provider(0, 2)};
  EXPECT_THROW(sandwich_covariance(ps, Family::poisson(), zero_params(), {false, true, false}),
               SingularDesignError);
}

TEST(Fit, SingleGridPointWithFullNullSetEqualsNormalMle)
{
  // Ten providers whose Z-scores sit well inside any plausible null band.
  std::vector<ProviderSummary> ps;
  const double zs[] = {0.3, -0.2, 0.1, 0.5, -0.6, 0.0, 0.2, -0.1, 0.4, -0.3};
  const double ws[] = {-1.0, -0.4, 0.1, 0.9, 1.3, -0.2, 0.6, -1.1, 0.3, 0.0};
  for (int i = 0; i < 10; ++i)
    ps.push_back(unit_provider(zs[i], ws[i]));
  FitConfig cfg;
  cfg.pi0_grid = {1.0};
  const auto robust = fit(ps, Family::poisson(), cfg);
  ASSERT_EQ(robust.null_count(), 10u);
  cfg.mode = FitMode::NormalMle;
  const auto mle = fit(ps, Family::poisson(), cfg);
  EXPECT_EQ(robust.params.nu(0), mle.params.nu(0));
  EXPECT_EQ(robust.params.sigma2_alpha, mle.params.sigma2_alpha);
  EXPECT_EQ(robust.loglik, mle.loglik);
}

TEST(Fit, NormalMleUsesUntruncatedDensities)
{
  const auto data = dataset(72, 50, 0.2);
  FitConfig cfg;
  cfg.mode = FitMode::NormalMle;
  const auto f = fit(data.providers, data.family, cfg);
  EXPECT_EQ(f.pi0, 1.0);
  EXPECT_EQ(f.null_count(), data.providers.size());
  for (const auto& iv : f.intervals) {
    EXPECT_EQ(iv.lower, -stats::kInf);
    EXPECT_EQ(iv.upper, stats::kInf);
  }
}

TEST(Fit, InvariantToProviderOrder)
{
  auto data = dataset(73, 120, 0.1);
  const auto a = fit(data.providers, data.family);
  std::reverse(data.providers.begin(), data.providers.end());
  const auto b = fit(data.providers, data.family);
  EXPECT_NEAR(a.params.nu(0), b.params.nu(0), 1e-7);
  EXPECT_NEAR(a.params.sigma2_alpha, b.params.sigma2_alpha, 1e-7);
  EXPECT_EQ(a.pi0, b.pi0);
  EXPECT_NEAR(a.loglik, b.loglik, 1e-8);
}

TEST(Fit, ThreadCountDoesNotChangeResult)
{
  const auto data = dataset(74);
  FitConfig cfg;
  const auto a = fit(data.providers, data.family, cfg);
  cfg.threads = 4;
  const auto b = fit(data.providers, data.family, cfg);
  EXPECT_EQ(a.params.nu(0), b.params.nu(0));
  EXPECT_EQ(a.params.sigma2_alpha, b.params.sigma2_alpha);
  EXPECT_EQ(a.pi0, b.pi0);
}

TEST(Fit, OptimizerNeverWorsensStart)
{
  const auto data = dataset(75, 200, 0.2);
  const auto f = fit(data.providers, data.family);
  const ConfoundingParams start{f.init.nu0, std::max(f.init.sigma2_alpha0, 1e-3)};
  for (const auto& prof : f.profile) {
    const double at_start =
        log_likelihood(data.providers, data.family, start, prof.pi0, f.intervals, f.null_set);
    EXPECT_GE(prof.loglik, at_start) << prof.pi0;
  }
  EXPECT_GE(f.params.sigma2_alpha, 0.0);
}

TEST(Fit, NullSetMatchesIntervals)
{
  const auto data = dataset(76, 100, 0.1);
  const auto f = fit(data.providers, data.family);
  for (std::size_t i = 0; i < f.null_set.size(); ++i)
    EXPECT_EQ(f.null_set[i], f.naive_z[i] >= f.intervals[i].lower &&
                                 f.naive_z[i] <= f.intervals[i].upper);
}

TEST(Fit, Pi0ConcentratesNearOneWithoutOutliers)
{
  int high = 0;
  const int reps = 40;
  for (int r = 0; r < reps; ++r) {
    auto rng = make_stream(7700, static_cast<std::uint64_t>(r));
    const auto data = generate(SimScenario{}, rng);
    high += fit(data.providers, data.family).pi0 >= 0.9 ? 1 : 0;
  }
  EXPECT_GE(high, static_cast<int>(0.8 * reps));
}

TEST(Fit, RefitIntervalsRunsExtraPasses)
{
  const auto data = dataset(77, 150, 0.15);
  FitConfig cfg;
  cfg.refit_intervals = 2;
  const auto f = fit(data.providers, data.family, cfg);
  EXPECT_TRUE(std::isfinite(f.loglik));
  EXPECT_EQ(f.intervals.size(), data.providers.size());
  // The final intervals are centred on the previous pass's estimates, not the initializer.
  const auto first = fit(data.providers, data.family);
  EXPECT_NE(f.intervals.front().lower, first.intervals.front().lower);
  cfg.refit_intervals = -1;
  EXPECT_THROW(fit(data.providers, data.family, cfg), ValidationError);
}

TEST(Fit, Errors)
{
  const auto data = dataset(78, 30);
  FitConfig cfg;
  cfg.interval_multiplier = 1e-12;
  EXPECT_THROW(fit(data.providers, data.family, cfg), NoNullProvidersError);
  cfg = {};
  cfg.pi0_grid = {0.0};
  EXPECT_THROW(fit(data.providers, data.family, cfg), ValidationError);
  const std::vector<ProviderSummary> two(data.providers.begin(), data.providers.begin() + 2);
  EXPECT_THROW(fit(two, data.family), ValidationError);
}

TEST(Fit, CreNormalFamily)
{
  CreScenario s;
  s.seed = 79;
  const auto data = generate_cre(s);
  const auto f = fit(data.providers, data.family);
  EXPECT_NEAR(f.params.nu(0), 0.25, 0.2);
  EXPECT_TRUE(f.covariance.allFinite());
}
