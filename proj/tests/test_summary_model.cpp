#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "provconf/rng.hpp"
#include "provconf/summary_model.hpp"

using namespace provconf;

namespace {

ProviderSummary make(double o, double e, double n, Eigen::VectorXd w = Eigen::VectorXd(0))
{
  ProviderSummary p;
  p.id = "p";
  p.observed = o;
  p.expected = e;
  p.effective_size = n;
  p.covariates = std::move(w);
  return p;
}

Eigen::VectorXd vec1(double x)
{
  return Eigen::VectorXd::Constant(1, x);
}

struct Moments
{
  double mean = 0.0;
  double variance = 0.0;
  double se_mean = 0.0;
  double se_variance = 0.0;
};

// Sample moments of naive Z for O ~ Poisson(E * exp(w_nu + alpha)), alpha ~ N(0, s2).
Moments simulate_naive_z(double e, double w_nu, double s2, int draws, std::uint64_t seed,
                         double psi = 1.0)
{
  auto rng = make_stream(seed, 0);
  std::normal_distribution<double> alpha(0.0, std::sqrt(s2));
  double s1 = 0, s2sum = 0, s3 = 0, s4 = 0;
  for (int k = 0; k < draws; ++k) {
    const double mu = e * std::exp(w_nu + (s2 > 0 ? alpha(rng) : 0.0));
    std::poisson_distribution<long> pois(mu / psi);
    const double z = (psi * static_cast<double>(pois(rng)) - e) / std::sqrt(psi * e);
    s1 += z;
    s2sum += z * z;
    s3 += z * z * z;
    s4 += z * z * z * z;
  }
  const double n = draws;
  Moments m;
  m.mean = s1 / n;
  m.variance = s2sum / n - m.mean * m.mean;
  m.se_mean = std::sqrt(m.variance / n);
  const double mu4 = s4 / n - 4 * m.mean * s3 / n + 6 * m.mean * m.mean * s2sum / n -
                     3 * std::pow(m.mean, 4);
  m.se_variance = std::sqrt((mu4 - m.variance * m.variance) / n);
  return m;
}

}  // namespace

TEST(NaiveZ, HandExamples)
{
  EXPECT_EQ(naive_z(make(9, 9, 4), Family::poisson()), 0.0);
  EXPECT_EQ(naive_z(make(12, 9, 9), Family::poisson()), 1.0);
  EXPECT_EQ(naive_z(make(12, 9, 9), Family::quasi_poisson(4.0)), 0.5);
}

TEST(NaiveZ, AntisymmetricInResidual)
{
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.5, 50.0);
  std::uniform_int_distribution<int> counts(1, 60);
  for (int k = 0; k < 100; ++k) {
    // Integer-valued e and d keep e + d and e - d exact.
    const double e = counts(rng), n = u(rng), d = counts(rng) - 30;
    const Family f = Family::quasi_poisson(1.0 + u(rng) / 10);
    EXPECT_DOUBLE_EQ(naive_z(make(e + d, e, n), f), -naive_z(make(e - d, e, n), f));
  }
}

TEST(NaiveZ, RejectsNonFiniteInputs)
{
  EXPECT_THROW(naive_z(make(NAN, 1, 1), Family::poisson()), ValidationError);
  EXPECT_THROW(naive_z(make(1, 1, 0), Family::poisson()), ValidationError);
  EXPECT_THROW(naive_z(make(1, INFINITY, 1), Family::poisson()), ValidationError);
}

TEST(FamilyTest, PoissonForcesUnitDispersion)
{
  EXPECT_EQ(Family(FamilyKind::Poisson, 7.0).dispersion(), 1.0);
  EXPECT_THROW(Family::quasi_poisson(0.0), ValidationError);
  EXPECT_THROW(Family::normal(-1.0), ValidationError);
  EXPECT_EQ(parse_family_kind("quasipoisson"), FamilyKind::QuasiPoisson);
  EXPECT_THROW(parse_family_kind("binomial"), ValidationError);
}

TEST(NullMomentsTest, ZeroParametersGiveStandardNormalForEveryFamily)
{
  auto p = make(3, 5, 40, vec1(1.7));
  p.n_patients = 40;
  p.b3_sum = 33;
  const ConfoundingParams zero{vec1(0.0), 0.0};
  for (const Family& f : {Family::normal(2.0), Family::poisson(), Family::quasi_poisson(3.0),
                          Family::exp_family(1.5)}) {
    const auto m = null_moments(p, f, zero);
    EXPECT_EQ(m.mean, 0.0);
    EXPECT_EQ(m.variance, 1.0);
  }
}

TEST(NullMomentsTest, NormalSubstitution)
{
  auto p = make(0, 0, 100, vec1(1.0));
  p.n_patients = 100;
  const auto m = null_moments(p, Family::normal(1.0), {vec1(0.25), 0.1});
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_DOUBLE_EQ(m.variance, 11.0);
}

TEST(NullMomentsTest, PoissonMatchesMonteCarlo)
{
  // W'nu = 0.2, sigma2 = 0.1, n~ = E = 100.
  const auto p = make(0, 100, 100, vec1(1.0));
  const auto m = null_moments(p, Family::poisson(), {vec1(0.2), 0.1});
  const auto mc = simulate_naive_z(100.0, 0.2, 0.1, 200000, 11);
  EXPECT_NEAR(mc.mean, m.mean, 3.5 * mc.se_mean);
  EXPECT_NEAR(mc.variance, m.variance, 3.5 * mc.se_variance);
}

TEST(NullMomentsTest, QuasiPoissonMatchesMonteCarlo)
{
  const auto p = make(0, 80, 80, vec1(-1.0));
  const Family f = Family::quasi_poisson(2.0);
  const auto m = null_moments(p, f, {vec1(0.3), 0.05});
  const auto mc = simulate_naive_z(80.0, -0.3, 0.05, 200000, 12, 2.0);
  EXPECT_NEAR(mc.mean, m.mean, 3.5 * mc.se_mean);
  EXPECT_NEAR(mc.variance, m.variance, 3.5 * mc.se_variance);
}

TEST(NullMomentsTest, ExpFamilyApproxAgreesWithPoissonToFirstOrder)
{
  // b''' = b'' = E for Poisson; the gap between the approximate and exact
  // moments must vanish faster than the perturbation size.
  auto p = make(0, 50, 50, vec1(1.0));
  p.b3_sum = 50;
  double previous_ratio = INFINITY;
  for (double eps : {0.1, 0.03, 0.01, 0.003, 0.001}) {
    const ConfoundingParams params{vec1(eps), eps * eps};
    const auto exact = null_moments(p, Family::poisson(), params);
    const auto approx = null_moments(p, Family::exp_family(1.0), params);
    const double scale = std::sqrt(p.effective_size);
    const double gap = std::abs(exact.mean - approx.mean) / scale +
                       std::abs(exact.variance - approx.variance) / p.effective_size;
    const double ratio = gap / eps;
    EXPECT_LT(ratio, previous_ratio);
    previous_ratio = ratio;
  }
  EXPECT_LT(previous_ratio, 2e-3);
}

TEST(NullMomentsTest, DegenerateVarianceNamesProvider)
{
  auto p = make(1, 10, 10, vec1(1.0));
  p.id = "bad";
  p.b3_sum = 10;
  try {
    null_moments(p, Family::exp_family(1.0), {vec1(-5.0), 0.0});
    FAIL() << "expected DegenerateVarianceError";
  } catch (const DegenerateVarianceError& e) {
    EXPECT_EQ(e.provider_id(), "bad");
  }
}

TEST(NullMomentsTest, DimensionMismatchThrows)
{
  EXPECT_THROW(null_moments(make(1, 1, 1, vec1(1)), Family::poisson(), {Eigen::VectorXd(0), 0}),
               ValidationError);
}

TEST(CorrectedZ, IdentityAndCentering)
{
  const auto p = make(17, 11, 11, vec1(0.4));
  const Family f = Family::poisson();
  EXPECT_EQ(corrected_z(p, f, {vec1(0.0), 0.0}), naive_z(p, f));

  auto q = make(0, 0, 100, vec1(1.0));
  q.n_patients = 100;
  q.observed = 2.5 * 10.0;  // naive Z = 2.5 with sigma2_eps = 1
  EXPECT_NEAR(corrected_z(q, Family::normal(1.0), {vec1(0.25), 0.1}), 0.0, 1e-15);
}

TEST(CorrectedZ, NullProvidersAreStandardized)
{
  const double e = 60.0, w_nu = 0.35, s2 = 0.08;
  auto rng = make_stream(99, 0);
  std::normal_distribution<double> alpha(0.0, std::sqrt(s2));
  const ConfoundingParams params{vec1(w_nu), s2};
  const int draws = 100000;
  double s1 = 0, sq = 0;
  for (int k = 0; k < draws; ++k) {
    std::poisson_distribution<long> pois(e * std::exp(w_nu + alpha(rng)));
    const auto p = make(static_cast<double>(pois(rng)), e, e, vec1(1.0));
    const double z = corrected_z(p, Family::poisson(), params);
    s1 += z;
    sq += z * z;
  }
  const double mean = s1 / draws, var = sq / draws - mean * mean;
  EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(draws));
  EXPECT_GT(var, 0.9);
  EXPECT_LT(var, 1.1);
}

TEST(Validation, SignChecksApplyToCountFamilies)
{
  auto p = make(-3, -2, 10, vec1(0));
  p.n_patients = 10;
  EXPECT_NO_THROW(validate(p, Family::normal(1.0)));
  EXPECT_THROW(validate(p, Family::poisson()), ValidationError);
  auto q = make(3, 2, 10, vec1(0));
  EXPECT_THROW(validate(q, Family::normal(1.0)), ValidationError);  // no n_patients
  EXPECT_THROW(validate(q, Family::exp_family(1.0)), ValidationError);  // no b3_sum
  std::vector<ProviderSummary> mixed{q, make(1, 1, 1, Eigen::VectorXd::Zero(2))};
  EXPECT_THROW(validate(mixed, Family::poisson()), ValidationError);
}
