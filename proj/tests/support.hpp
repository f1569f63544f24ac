#pragma once

#include <cmath>
#include <random>

#include "mfat/metrics.hpp"
#include "mfat/mis.hpp"
#include "mfat/models.hpp"
#include "mfat/objective.hpp"

namespace mfat::testing {

/// Per-coordinate standard error of a self-normalized weighted mean.
inline Eigen::VectorXd standard_errors(const QuadratureRule& rule) {
  const Eigen::VectorXd mean = rule.points().transpose() * rule.weights();
  Eigen::VectorXd se = Eigen::VectorXd::Zero(mean.size());
  for (std::size_t k = 0; k < rule.size(); ++k)
    for (Eigen::Index j = 0; j < mean.size(); ++j) {
      const double d = rule.point(k)[static_cast<std::size_t>(j)] - mean[j];
      se[j] += rule.weight(k) * rule.weight(k) * d * d;
    }
  return se.cwiseSqrt();
}

inline Eigen::VectorXd rule_mean(const QuadratureRule& rule) { return rule.points().transpose() * rule.weights(); }

/// Tensor Gauss-Legendre posterior mean for a closed-form log-likelihood.
inline Eigen::VectorXd grid_oracle_mean(const LogLikelihoodFn& loglik, std::size_t order) {
  return rule_mean(reweighted_grid_rule(loglik, order, 2));
}

/// Stage memo built from the pullback of an rQMC rule through `proposal`.
inline StageMemo make_memo(const Surrogate& proposal, std::size_t n, std::uint64_t seed,
                           const LogLikelihoodFn& loglik, std::size_t fidelity = 0) {
  const auto rule = proposal.pullback_quadrature(rqmc_rule(proposal.dimension(), n, seed));
  StageMemo m{proposal, rule.points(), rule.weights(), Eigen::VectorXd(static_cast<Eigen::Index>(n)), fidelity};
  for (std::size_t k = 0; k < n; ++k) m.log_likelihood[static_cast<Eigen::Index>(k)] = loglik(rule.point(k));
  return m;
}

inline Surrogate random_surrogate(std::size_t dim, unsigned order, std::uint64_t seed, double scale) {
  TriangularMap map(dim, order);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  Eigen::VectorXd c(static_cast<Eigen::Index>(map.parameter_count()));
  for (auto& v : c) v = g(rng);
  map.set_coefficients(c);
  return Surrogate(Surrogate(dim), std::move(map));
}

struct TwoStage {
  StageMemo first, second;
  QuadratureRule mis;
};

/// Prior stage, a surrogate fitted to its reweighted rule, a second stage
/// drawn from that surrogate, and the combined rule at beta = 1.
inline TwoStage two_stage_mis(const LogLikelihoodFn& loglik, std::size_t n, std::uint64_t seed,
                              std::size_t fit_steps = 300) {
  const Surrogate prior(2);
  StageMemo first = make_memo(prior, n, seed, loglik);
  FitConfig cfg;
  cfg.steps = fit_steps;
  const auto fitted = fit(snis_reweight(first, 1.0), MapFamily{2, 3}, prior, cfg).surrogate;
  StageMemo second = make_memo(fitted, n, seed + 1000, loglik);
  auto mis = mis_quadrature(1.0, {first, second});
  return {std::move(first), std::move(second), std::move(mis)};
}

}  // namespace mfat::testing
