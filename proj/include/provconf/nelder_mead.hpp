#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "provconf/error.hpp"

namespace provconf {

struct NelderMeadConfig
{
  double reflection = 1.0;
  double expansion = 2.0;
  double contraction = 0.5;
  double shrink = 0.5;
  double ftol = 1e-10;  ///< stop when max - min objective over the simplex falls below this
  /// ... and every vertex lies within xtol * (1 + |best|) of the best one per
  /// coordinate. Without it a simplex straddling the optimum symmetrically
  /// has zero spread and stops early.
  double xtol = 1e-6;
  int max_iterations = 2000;
  /// Initial simplex offsets per coordinate. Empty means 0.1 * max(1, |x_j|).
  std::vector<double> initial_step;
  /// Rebuild the simplex around the best vertex this many times after convergence.
  int restarts = 0;
};

enum class NelderMeadStatus { Converged, MaxIterations };

struct NelderMeadResult
{
  Eigen::VectorXd argmax;
  double value = -std::numeric_limits<double>::infinity();
  NelderMeadStatus status = NelderMeadStatus::MaxIterations;
  int iterations = 0;
  int evaluations = 0;
};

/// Maximizes `objective` with the Nelder-Mead simplex method. Points where the
/// objective is -inf or NaN are treated as infinitely bad, so the search
/// retreats from them.
template <class Objective>
NelderMeadResult nelder_mead(Objective&& objective, const Eigen::VectorXd& start,
                             const NelderMeadConfig& config = {})
{
  const auto n = start.size();
  if (!start.allFinite())
    throw InvalidStartError("nelder_mead: start point is not finite");

  NelderMeadResult result;
  // Minimize the negated objective; NaN and -inf map to +inf.
  auto cost = [&](const Eigen::VectorXd& x) {
    ++result.evaluations;
    const double v = objective(x);
    return std::isnan(v) ? std::numeric_limits<double>::infinity() : -v;
  };

  const double start_cost = cost(start);
  if (std::isinf(start_cost) && start_cost > 0.0)
    throw InvalidStartError("nelder_mead: objective is -inf at the start point");

  if (n == 0) {
    result.argmax = start;
    result.value = -start_cost;
    result.status = NelderMeadStatus::Converged;
    return result;
  }

  std::vector<Eigen::VectorXd> simplex(static_cast<std::size_t>(n + 1), start);
  std::vector<double> costs(static_cast<std::size_t>(n + 1), start_cost);

  auto build_simplex = [&](const Eigen::VectorXd& base, double base_cost) {
    simplex[0] = base;
    costs[0] = base_cost;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double step = config.initial_step.empty()
                              ? 0.1 * std::max(1.0, std::abs(base(j)))
                              : config.initial_step[static_cast<std::size_t>(j)];
      Eigen::VectorXd v = base;
      v(j) += step;
      simplex[static_cast<std::size_t>(j + 1)] = v;
      costs[static_cast<std::size_t>(j + 1)] = cost(v);
    }
  };

  std::vector<std::size_t> order(simplex.size());
  auto sort_simplex = [&] {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return costs[a] < costs[b]; });
    std::vector<Eigen::VectorXd> s;
    std::vector<double> c;
    s.reserve(order.size());
    c.reserve(order.size());
    for (auto k : order) {
      s.push_back(std::move(simplex[k]));
      c.push_back(costs[k]);
    }
    simplex = std::move(s);
    costs = std::move(c);
  };

  auto run = [&]() -> bool {
    const auto last = static_cast<std::size_t>(n);
    while (result.iterations < config.max_iterations) {
      sort_simplex();
      const double spread = costs[last] - costs[0];
      if (std::isfinite(spread) && spread < config.ftol) {
        double size = 0.0;
        for (std::size_t k = 1; k <= last; ++k)
          size = std::max(size, ((simplex[k] - simplex[0]).array().abs() /
                                 (1.0 + simplex[0].array().abs()))
                                    .maxCoeff());
        if (size <= config.xtol)
          return true;
      }
      ++result.iterations;

      Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
      for (std::size_t k = 0; k < last; ++k)
        centroid += simplex[k];
      centroid /= static_cast<double>(n);

      const Eigen::VectorXd reflected =
          centroid + config.reflection * (centroid - simplex[last]);
      const double reflected_cost = cost(reflected);

      if (reflected_cost < costs[0]) {
        const Eigen::VectorXd expanded =
            centroid + config.expansion * (reflected - centroid);
        const double expanded_cost = cost(expanded);
        if (expanded_cost < reflected_cost) {
          simplex[last] = expanded;
          costs[last] = expanded_cost;
        } else {
          simplex[last] = reflected;
          costs[last] = reflected_cost;
        }
        continue;
      }
      if (reflected_cost < costs[last - 1]) {
        simplex[last] = reflected;
        costs[last] = reflected_cost;
        continue;
      }

      // Contraction: outside if the reflection improved on the worst vertex.
      const bool outside = reflected_cost < costs[last];
      const Eigen::VectorXd contracted =
          outside ? Eigen::VectorXd(centroid + config.contraction * (reflected - centroid))
                  : Eigen::VectorXd(centroid + config.contraction * (simplex[last] - centroid));
      const double contracted_cost = cost(contracted);
      if (contracted_cost < (outside ? reflected_cost : costs[last])) {
        simplex[last] = contracted;
        costs[last] = contracted_cost;
        continue;
      }

      for (std::size_t k = 1; k <= last; ++k) {
        simplex[k] = simplex[0] + config.shrink * (simplex[k] - simplex[0]);
        costs[k] = cost(simplex[k]);
      }
    }
    sort_simplex();
    return false;
  };

  build_simplex(start, start_cost);
  bool converged = run();
  for (int r = 0; r < config.restarts && converged; ++r) {
    const Eigen::VectorXd best = simplex[0];
    const double best_cost = costs[0];
    build_simplex(best, best_cost);
    converged = run();
  }

  result.argmax = simplex[0];
  result.value = -costs[0];
  result.status = converged ? NelderMeadStatus::Converged : NelderMeadStatus::MaxIterations;
  return result;
}

}  // namespace provconf
