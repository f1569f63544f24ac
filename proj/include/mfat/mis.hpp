#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "errors.hpp"
#include "io.hpp"
#include "parallel.hpp"
#include "quadrature.hpp"
#include "transport.hpp"

namespace mfat {

/// Cached record of one annealing step: the proposal that produced the
/// points, its base weights and the (log) likelihood values there.
struct StageMemo {
  Surrogate surrogate;
  PointMatrix points;
  Eigen::VectorXd base_weights;
  Eigen::VectorXd log_likelihood;
  std::size_t fidelity = 0;

  std::size_t count() const noexcept { return static_cast<std::size_t>(points.rows()); }

  void validate() const {
    const auto n = points.rows();
    if (n == 0) throw ContractViolation("stage memo is empty");
    if (base_weights.size() != n || log_likelihood.size() != n)
      throw ContractViolation("stage memo sequences differ in length");
    if (static_cast<std::size_t>(points.cols()) != surrogate.dimension())
      throw ContractViolation("stage memo dimension mismatch");
    for (Eigen::Index k = 0; k < n; ++k) {
      if (std::isnan(log_likelihood[k]) || log_likelihood[k] == std::numeric_limits<double>::infinity())
        throw ContractViolation("stage memo log-likelihood must be finite or -inf");
      if (!(base_weights[k] >= 0.0) || !std::isfinite(base_weights[k]))
        throw ContractViolation("stage memo base weights must be finite and >= 0");
    }
  }
};

/// Power-heuristic partition values for one point: alpha_i proportional to
/// (n_i * density_i)^gamma, computed from log counts and log densities.
/// Stages whose density is zero get alpha = 0.
inline std::vector<double> power_heuristic(const std::vector<double>& counts,
                                           const std::vector<double>& log_densities, double gamma) {
  if (counts.size() != log_densities.size() || counts.empty())
    throw ContractViolation("power_heuristic: mismatched or empty inputs");
  std::vector<double> l(counts.size());
  double mx = kNegInf;
  for (std::size_t i = 0; i < l.size(); ++i) {
    l[i] = log_densities[i] == kNegInf ? kNegInf : gamma * (std::log(counts[i]) + log_densities[i]);
    mx = std::max(mx, l[i]);
  }
  std::vector<double> alpha(l.size(), 0.0);
  if (mx == kNegInf) return alpha;
  double total = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) total += l[i] == kNegInf ? 0.0 : std::exp(l[i] - mx);
  for (std::size_t i = 0; i < l.size(); ++i)
    alpha[i] = l[i] == kNegInf ? 0.0 : std::exp(l[i] - mx) / total;
  return alpha;
}

/// Beta-independent part of the multiple tempered importance-weighted
/// rule. Building it evaluates every stage surrogate at every point once;
/// rules for any beta then follow without density or likelihood calls.
class MisPrecompute {
 public:
  MisPrecompute(const std::vector<StageMemo>& memos, double gamma = 2.0, std::size_t workers = 1)
      : gamma_(gamma) {
    if (memos.empty()) throw ContractViolation("mis_quadrature needs at least one memo");
    const std::size_t fid = memos.front().fidelity;
    const std::size_t dim = memos.front().surrogate.dimension();
    std::size_t total = 0;
    for (const auto& m : memos) {
      m.validate();
      if (m.fidelity != fid) throw ContractViolation("mis_quadrature: memos mix fidelity tags");
      if (m.surrogate.dimension() != dim) throw ContractViolation("mis_quadrature: dimension mismatch");
      total += m.count();
    }
    points_.resize(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(dim));
    log_base_.resize(static_cast<Eigen::Index>(total));
    log_u_.resize(static_cast<Eigen::Index>(total));
    partition_.assign(total, std::vector<double>(memos.size(), 0.0));
    std::vector<double> counts;
    for (const auto& m : memos) counts.push_back(static_cast<double>(m.count()));
    std::vector<std::pair<std::size_t, std::size_t>> owner;  // (stage, local index)
    for (std::size_t i = 0; i < memos.size(); ++i)
      for (std::size_t k = 0; k < memos[i].count(); ++k) owner.emplace_back(i, k);
    parallel_for(total, workers, [&](std::size_t r) {
      const auto [i, k] = owner[r];
      const auto& m = memos[i];
      const std::span<const double> theta(m.points.data() + k * dim, dim);
      std::vector<double> logd(memos.size());
      for (std::size_t s = 0; s < memos.size(); ++s) logd[s] = memos[s].surrogate.log_density(theta);
      partition_[r] = power_heuristic(counts, logd, gamma_);
      const auto ri = static_cast<Eigen::Index>(r);
      const auto ki = static_cast<Eigen::Index>(k);
      points_.row(ri) = m.points.row(ki);
      log_u_[ri] = m.log_likelihood[ki];
      const double a = partition_[r][i];
      // Uniform prior: v = proposal density / 1.
      log_base_[ri] = (a > 0.0 && m.base_weights[ki] > 0.0 && std::isfinite(logd[i]))
                          ? std::log(a) + std::log(m.base_weights[ki]) - logd[i]
                          : kNegInf;
    });
  }

  std::size_t size() const noexcept { return static_cast<std::size_t>(points_.rows()); }
  double gamma() const noexcept { return gamma_; }
  const std::vector<std::vector<double>>& partition() const noexcept { return partition_; }

  /// Normalized rule targeting the likelihood tempered by beta.
  QuadratureRule rule(double beta) const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ContractViolation("beta must lie in [0,1]");
    const auto n = points_.rows();
    Eigen::VectorXd lw(n);
    double mx = kNegInf;
    for (Eigen::Index k = 0; k < n; ++k) {
      lw[k] = (log_base_[k] == kNegInf || log_u_[k] == kNegInf) ? kNegInf
                                                                : log_base_[k] + beta * log_u_[k];
      if (beta == 0.0 && log_base_[k] != kNegInf) lw[k] = log_base_[k];
      mx = std::max(mx, lw[k]);
    }
    if (mx == kNegInf || !std::isfinite(mx))
      throw DegenerateRuleError("all importance weights vanish at beta = " + io::format_double(beta));
    Eigen::VectorXd w(n);
    for (Eigen::Index k = 0; k < n; ++k) w[k] = lw[k] == kNegInf ? 0.0 : std::exp(lw[k] - mx);
    try {
      return normalize(QuadratureRule(points_, std::move(w)));
    } catch (const DegenerateRuleError&) {
      throw DegenerateRuleError("all importance weights vanish at beta = " + io::format_double(beta));
    }
  }

 private:
  double gamma_;
  PointMatrix points_;
  Eigen::VectorXd log_base_, log_u_;
  std::vector<std::vector<double>> partition_;
};

/// Multiple tempered importance-weighted quadrature over all memos.
inline QuadratureRule mis_quadrature(double beta, const std::vector<StageMemo>& memos,
                                     double gamma = 2.0) {
  return MisPrecompute(memos, gamma).rule(beta);
}

/// Single-stage self-normalized reweighting.
inline QuadratureRule snis_reweight(const StageMemo& memo, double beta) {
  return MisPrecompute({memo}).rule(beta);
}

}  // namespace mfat
