#include <gtest/gtest.h>

#include <boost/math/distributions/gamma.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <random>

#include "provconf/stats.hpp"

namespace bm = boost::math;
using namespace provconf;

TEST(Normal, CdfAndQuantileMatchBoost)
{
  const bm::normal_distribution<> n01;
  for (double x = -30.0; x <= 8.0; x += 0.37) {
    const double ref = bm::cdf(n01, x);
    EXPECT_NEAR(stats::normal_cdf(x) / ref, 1.0, 1e-12) << x;
    EXPECT_NEAR(stats::normal_sf(-x) / ref, 1.0, 1e-12) << x;
  }
  for (double p : {1e-300, 1e-12, 1e-5, 0.01, 0.025, 0.3, 0.5, 0.77, 0.975, 1 - 1e-9}) {
    const double q = stats::normal_quantile(p);
    EXPECT_NEAR(q, bm::quantile(n01, p), 1e-12 * std::max(1.0, std::abs(q))) << p;
  }
}

TEST(Normal, IntervalProbabilityIsStableInBothTails)
{
  const bm::normal_distribution<> n01;
  EXPECT_NEAR(stats::normal_interval_prob(-1.0, 1.0), 0.6826894921370859, 1e-14);
  const double far = stats::normal_interval_prob(9.0, 10.0);
  EXPECT_NEAR(far / (bm::cdf(bm::complement(n01, 9.0)) - bm::cdf(bm::complement(n01, 10.0))), 1.0,
              1e-10);
  EXPECT_NEAR(stats::normal_interval_prob(-10.0, -9.0), far, 1e-25);
  EXPECT_EQ(stats::normal_interval_prob(-stats::kInf, stats::kInf), 1.0);
}

TEST(Gamma, IncompleteGammaMatchesBoost)
{
  for (double a : {0.3, 1.0, 2.0, 7.5, 52.0, 652.0, 5000.0})
    for (double rel : {1e-3, 0.2, 0.8, 1.0, 1.2, 3.0, 40.0}) {
      const double x = a * rel;
      EXPECT_NEAR(stats::regularized_gamma_p(a, x), bm::gamma_p(a, x), 1e-13) << a << " " << x;
      const double q = bm::gamma_q(a, x);
      EXPECT_NEAR(stats::regularized_gamma_q(a, x), q, 1e-13 + 1e-10 * q) << a << " " << x;
    }
  // Far tails neither throw nor lose the sign of the answer.
  EXPECT_EQ(stats::regularized_gamma_q(3.0, 1e19), 0.0);
  EXPECT_EQ(stats::regularized_gamma_p(500.0, 1e-6), 0.0);
}

TEST(Gamma, QuantileInvertsCdf)
{
  for (double shape : {2.0, 2.5, 10.0, 102.0, 652.0})
    for (double rate : {0.5, 2.0, 102.0})
      for (double p : {1e-6, 0.025, 0.5, 0.975, 1 - 1e-8}) {
        const double q = stats::gamma_quantile(p, shape, rate);
        const bm::gamma_distribution<> g(shape, 1.0 / rate);
        EXPECT_NEAR(q / bm::quantile(g, p), 1.0, 1e-11) << shape << " " << rate << " " << p;
      }
}

TEST(Gamma, LogPdfMatchesBoost)
{
  const bm::gamma_distribution<> g(7.0, 1.0 / 3.0);
  for (double x : {0.01, 0.5, 2.0, 9.0})
    EXPECT_NEAR(stats::gamma_pdf(x, 7.0, 3.0), bm::pdf(g, x), 1e-14);
  EXPECT_EQ(stats::gamma_pdf(-1.0, 2.0, 2.0), 0.0);
}

TEST(GaussHermite, IntegratesPolynomialsExactly)
{
  for (int n : {8, 9, 32, 64, 128, 256, 512}) {
    const auto rule = stats::gauss_hermite(n);
    ASSERT_EQ(rule.nodes.size(), static_cast<std::size_t>(n));
    for (std::size_t k = 1; k < rule.nodes.size(); ++k)
      ASSERT_LT(rule.nodes[k - 1], rule.nodes[k]);
    // Moments of exp(-x^2): E[x^(2m)] * sqrt(pi) = (2m-1)!! / 2^m * sqrt(pi).
    double m0 = 0, m2 = 0, m6 = 0;
    for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
      const double x = rule.nodes[k];
      m0 += rule.weights[k];
      m2 += rule.weights[k] * x * x;
      m6 += rule.weights[k] * std::pow(x, 6);
      EXPECT_NEAR(rule.scaled_weights[k] * std::exp(-x * x), rule.weights[k],
                  1e-13 * rule.weights[k] + 1e-300);
    }
    const double rp = std::sqrt(std::numbers::pi);
    EXPECT_NEAR(m0, rp, 1e-13);
    EXPECT_NEAR(m2, rp / 2, 1e-13);
    EXPECT_NEAR(m6, rp * 15.0 / 8.0, 1e-12);
  }
}

TEST(GaussHermite, SmallRuleMatchesTabulatedNodes)
{
  // Three-point rule: nodes 0, +-sqrt(3/2); weights 2 sqrt(pi)/3, sqrt(pi)/6.
  const auto rule = stats::gauss_hermite(3);
  EXPECT_NEAR(rule.nodes[2], std::sqrt(1.5), 1e-15);
  EXPECT_EQ(rule.nodes[1], 0.0);
  EXPECT_NEAR(rule.weights[1], 2.0 * std::sqrt(std::numbers::pi) / 3.0, 1e-15);
  EXPECT_NEAR(rule.weights[0], std::sqrt(std::numbers::pi) / 6.0, 1e-15);
}

TEST(Median, OddEvenAndErrors)
{
  EXPECT_EQ(stats::median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(stats::median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_THROW(stats::median({}), ValidationError);
}
