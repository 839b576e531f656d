#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "provconf/rng.hpp"
#include "provconf/robust_init.hpp"
#include "provconf/sim_lab.hpp"

using namespace provconf;

namespace {

// Huber location estimate by the textbook fixed point
//   mu <- sum(w_i y_i) / sum(w_i),  w_i = min(1, k s / |y_i - mu|),
// with s = 1.4826 * median|y - mu| refreshed each step.
double huber_location_oracle(std::vector<double> y, double k)
{
  double mu = 0;
  for (double v : y)
    mu += v / static_cast<double>(y.size());
  for (int it = 0; it < 10000; ++it) {
    std::vector<double> dev;
    for (double v : y)
      dev.push_back(std::abs(v - mu));
    std::sort(dev.begin(), dev.end());
    const std::size_t h = dev.size() / 2;
    const double med = dev.size() % 2 ? dev[h] : 0.5 * (dev[h - 1] + dev[h]);
    const double s = std::max(1.482602218505602 * med, 1e-8);
    double num = 0, den = 0;
    for (double v : y) {
      const double u = std::abs(v - mu) / s;
      const double w = u <= k ? 1.0 : k / u;
      num += w * v;
      den += w;
    }
    const double next = num / den;
    if (std::abs(next - mu) < 1e-14)
      return next;
    mu = next;
  }
  return mu;
}

std::vector<ProviderSummary> null_providers(int count, int dim, std::uint64_t seed)
{
  auto rng = make_stream(seed, 0);
  std::normal_distribution<double> n01;
  std::vector<ProviderSummary> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    auto& p = out[static_cast<std::size_t>(i)];
    p.id = "p" + std::to_string(i);
    p.expected = 100;
    p.effective_size = 100;
    p.observed = 100 + 10 * n01(rng);
    p.covariates = Eigen::VectorXd::Zero(dim);
  }
  return out;
}

}  // namespace

TEST(Huber, OutlierResistantLocation)
{
  const Eigen::VectorXd y = (Eigen::VectorXd(5) << 1, 1, 1, 1, 100).finished();
  const Eigen::MatrixXd x = Eigen::MatrixXd::Ones(5, 1);
  const auto r = huber_regression(y, x);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(x.colPivHouseholderQr().solve(y)(0), 20.8, 1e-12);
  EXPECT_NEAR(r.coefficients(0), 1.0, 1e-6);
  EXPECT_NEAR(r.coefficients(0), huber_location_oracle({1, 1, 1, 1, 100}, 1.345), 1e-6);
}

TEST(Huber, MatchesLocationOracleOnNoisyData)
{
  auto rng = make_stream(5, 0);
  std::normal_distribution<double> n01;
  std::vector<double> y;
  for (int i = 0; i < 60; ++i)
    y.push_back(n01(rng) + (i % 7 == 0 ? 8.0 : 0.0));
  const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), 60);
  const auto r = huber_regression(yv, Eigen::MatrixXd::Ones(60, 1), {.tolerance = 1e-13});
  EXPECT_NEAR(r.coefficients(0), huber_location_oracle(y, 1.345), 1e-10);
}

TEST(Huber, InterpolatesExactLinearData)
{
  Eigen::MatrixXd x(6, 2);
  x << 1, 0, 1, 1, 1, 2, 1, 3, 1, 4, 1, 5;
  const Eigen::VectorXd beta = (Eigen::VectorXd(2) << -1.5, 0.75).finished();
  const auto r = huber_regression(x * beta, x);
  EXPECT_NEAR((r.coefficients - beta).cwiseAbs().maxCoeff(), 0.0, 1e-12);
  EXPECT_EQ(r.scale, 1e-8);
}

TEST(Huber, LargeSampleNormalResponses)
{
  const int n = 10000;
  auto rng = make_stream(17, 0);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd x(n, 2);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = n01(rng);
    y(i) = n01(rng);
  }
  const auto r = huber_regression(y, x);
  EXPECT_LT(r.coefficients.cwiseAbs().maxCoeff(), 3.0 / std::sqrt(n));
  EXPECT_NEAR(r.scale, 1.0, 0.05);
}

TEST(Huber, LargeTuningGivesLeastSquares)
{
  auto rng = make_stream(3, 0);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd x(40, 2);
  Eigen::VectorXd y(40);
  for (int i = 0; i < 40; ++i) {
    x(i, 0) = 1;
    x(i, 1) = n01(rng);
    y(i) = 2 - x(i, 1) + n01(rng) * (i == 3 ? 30 : 1);
  }
  const auto r = huber_regression(y, x, {.tuning = 1e6});
  EXPECT_LT((r.coefficients - x.colPivHouseholderQr().solve(y)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Huber, ScaleEquivariance)
{
  auto rng = make_stream(4, 0);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd x(50, 2);
  Eigen::VectorXd y(50);
  for (int i = 0; i < 50; ++i) {
    x(i, 0) = 1;
    x(i, 1) = n01(rng);
    y(i) = 0.5 + x(i, 1) + n01(rng) + (i < 5 ? 10 : 0);
  }
  const HuberOptions tight{.tolerance = 1e-12};
  const auto a = huber_regression(y, x, tight);
  for (double c : {-3.0, 0.01, 250.0}) {
    const auto b = huber_regression(c * y, x, {.tolerance = 1e-12 * std::abs(c)});
    EXPECT_LT((b.coefficients - c * a.coefficients).cwiseAbs().maxCoeff(), 1e-8 * std::abs(c));
    EXPECT_NEAR(b.scale, std::abs(c) * a.scale, 1e-8 * std::abs(c));
  }
}

TEST(Huber, Errors)
{
  Eigen::MatrixXd x(4, 2);
  x << 1, 2, 1, 2, 1, 2, 1, 2;
  EXPECT_THROW(huber_regression(Eigen::VectorXd::Ones(4), x), SingularDesignError);
  EXPECT_THROW(huber_regression(Eigen::VectorXd::Ones(2), Eigen::MatrixXd::Ones(2, 2)),
               ValidationError);
  EXPECT_THROW(huber_regression(Eigen::VectorXd::Ones(4), Eigen::MatrixXd::Ones(4, 1), {.tuning = 0}),
               ValidationError);
}

TEST(Initialize, NullConfigurationWithoutCovariates)
{
  const auto providers = null_providers(400, 0, 21);
  const auto init = initialize(providers, Family::poisson());
  EXPECT_EQ(init.nu0.size(), 0);
  EXPECT_NEAR(init.scale0, 1.0, 0.15);
  EXPECT_LT(init.sigma2_alpha0, 0.003);
}

TEST(Initialize, ZeroCovariateColumnIsSingular)
{
  EXPECT_THROW(initialize(null_providers(50, 1, 22), Family::poisson()), SingularDesignError);
}

TEST(Initialize, ClampsNegativeVarianceAtZero)
{
  // Z-scores tightly clustered give s^2 well below 1.
  auto providers = null_providers(30, 0, 23);
  for (std::size_t i = 0; i < providers.size(); ++i)
    providers[i].observed = 100 + 0.1 * static_cast<double>(i % 5);
  const auto init = initialize(providers, Family::poisson());
  EXPECT_LT(init.scale0 * init.scale0 - 1.0, 0.0);
  EXPECT_EQ(init.sigma2_alpha0, 0.0);
}

TEST(Initialize, DispersionScalesVarianceInitializer)
{
  SimScenario s;
  s.seed = 31;
  auto data = generate(s);
  const auto a = initialize(data.providers, Family::poisson());
  // Quasi-Poisson with psi: Z shrinks by sqrt(psi) and the design by the same
  // factor, so nu0 is unchanged and the variance initializer is rescaled.
  const double psi = 2.0;
  const auto b = initialize(data.providers, Family::quasi_poisson(psi));
  EXPECT_NEAR(b.nu0(0), a.nu0(0), 1e-9);
  EXPECT_NEAR(b.scale0, a.scale0 / std::sqrt(psi), 1e-9);
}

TEST(Initialize, PermutationInvariant)
{
  SimScenario s;
  s.seed = 32;
  s.outlier_proportion = 0.1;
  auto data = generate(s);
  const auto a = initialize(data.providers, Family::poisson());
  std::mt19937_64 rng(1);
  for (int k = 0; k < 3; ++k) {
    std::shuffle(data.providers.begin(), data.providers.end(), rng);
    const auto b = initialize(data.providers, Family::poisson());
    EXPECT_NEAR(b.nu0(0), a.nu0(0), 1e-10);
    EXPECT_NEAR(b.scale0, a.scale0, 1e-10);
    EXPECT_NEAR(b.sigma2_alpha0, a.sigma2_alpha0, 1e-10);
  }
}

TEST(Initialize, RecoversNuOnAverageInEstimationDesign)
{
  double total = 0;
  const int reps = 200;
  for (int r = 0; r < reps; ++r) {
    auto rng = make_stream(4100, static_cast<std::uint64_t>(r));
    const auto data = generate(SimScenario{}, rng);
    const auto init = initialize(data.providers, data.family);
    EXPECT_GE(init.sigma2_alpha0, 0.0);
    total += init.nu0(0);
  }
  EXPECT_NEAR(total / reps, 0.25, 0.05);
}
