#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <array>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "parallel.hpp"
#include "quadrature.hpp"

namespace mfat {

struct Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// Weighted mean and covariance with the (1 - sum w^2)^-1 bias correction.
inline Moments weighted_moments(const QuadratureRule& rule) {
  if (!rule.normalized()) throw ContractViolation("weighted_moments requires a normalized rule");
  if (rule.size() < 2) throw ContractViolation("weighted_moments requires at least two points");
  const auto& w = rule.weights();
  const double sw2 = w.squaredNorm();
  if (!(1.0 - sw2 > 1e-14))
    throw DegenerateRuleError("covariance undefined: a single point carries all the weight");
  Moments m;
  m.mean = rule.points().transpose() * w;
  const Eigen::MatrixXd centered = rule.points().rowwise() - m.mean.transpose();
  m.covariance = centered.transpose() * w.asDiagonal() * centered / (1.0 - sw2);
  return m;
}

/// Plain quadrature moments (no bias correction) for deterministic rules
/// such as tensor grids, where sum w^2 reflects the node count rather than
/// an effective sample size.
inline Moments quadrature_moments(const QuadratureRule& rule) {
  if (!rule.normalized()) throw ContractViolation("quadrature_moments requires a normalized rule");
  Moments m;
  m.mean = rule.points().transpose() * rule.weights();
  const Eigen::MatrixXd centered = rule.points().rowwise() - m.mean.transpose();
  m.covariance = centered.transpose() * rule.weights().asDiagonal() * centered;
  return m;
}

/// Root sum of squared logs of the generalized eigenvalues of (c1, c2).
inline double forstner(const Eigen::MatrixXd& c1, const Eigen::MatrixXd& c2) {
  if (c1.rows() != c1.cols() || c1.rows() != c2.rows() || c2.rows() != c2.cols())
    throw ContractViolation("forstner: matrices must be square and of equal size");
  for (const Eigen::MatrixXd* c : {&c1, &c2}) {
    if (!c->isApprox(c->transpose(), 1e-10)) throw ContractViolation("forstner: matrix not symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(*c);
    if (llt.info() != Eigen::Success) throw ContractViolation("forstner: matrix not positive definite");
  }
  const Eigen::MatrixXd a = 0.5 * (c1 + c1.transpose());
  const Eigen::MatrixXd b = 0.5 * (c2 + c2.transpose());
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(a, b);
  if (es.info() != Eigen::Success) throw ContractViolation("forstner: eigen-decomposition failed");
  double s = 0.0;
  for (double l : es.eigenvalues()) {
    if (!(l > 0.0)) throw ContractViolation("forstner: non-positive generalized eigenvalue");
    s += std::log(l) * std::log(l);
  }
  return std::sqrt(s);
}

enum class KernelFamily { SquaredExponential, Matern15 };

struct KernelSpec {
  KernelFamily family = KernelFamily::SquaredExponential;
  double bandwidth = 0.05;

  double operator()(double distance) const {
    const double t = distance / bandwidth;
    if (family == KernelFamily::SquaredExponential) return std::exp(-0.5 * t * t);
    const double s = std::sqrt(3.0) * t;
    return (1.0 + s) * std::exp(-s);
  }
};

namespace detail {

/// Weighted kernel sums sum_k sum_l w_k v_l K(x_k, y_l) for several kernels
/// at once, reduced row by row in index order.
inline std::vector<double> kernel_means(const QuadratureRule& a, const QuadratureRule& b,
                                        const std::vector<KernelSpec>& kernels, std::size_t workers) {
  if (a.dimension() != b.dimension()) throw ContractViolation("mmd: dimension mismatch");
  const std::size_t nk = kernels.size();
  std::vector<double> rows(a.size() * nk, 0.0);
  parallel_for(a.size(), workers, [&](std::size_t i) {
    const auto xi = a.point(i);
    std::vector<double> acc(nk, 0.0);
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double vj = b.weight(j);
      if (vj == 0.0) continue;
      const auto yj = b.point(j);
      double d2 = 0.0;
      for (std::size_t c = 0; c < xi.size(); ++c) d2 += (xi[c] - yj[c]) * (xi[c] - yj[c]);
      const double d = std::sqrt(d2);
      for (std::size_t k = 0; k < nk; ++k) acc[k] += vj * kernels[k](d);
    }
    for (std::size_t k = 0; k < nk; ++k) rows[i * nk + k] = a.weight(i) * acc[k];
  });
  std::vector<double> out(nk, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < nk; ++k) out[k] += rows[i * nk + k];
  return out;
}

}  // namespace detail

/// Squared maximum mean discrepancy between two weighted rules.
inline double mmd2(const QuadratureRule& q1, const QuadratureRule& q2, const KernelSpec& kernel,
                   std::size_t workers = 1) {
  if (!q1.normalized() || !q2.normalized()) throw ContractViolation("mmd2 requires normalized rules");
  const std::vector<KernelSpec> k{kernel};
  return detail::kernel_means(q1, q1, k, workers)[0] - 2.0 * detail::kernel_means(q1, q2, k, workers)[0] +
         detail::kernel_means(q2, q2, k, workers)[0];
}

inline double mmd(const QuadratureRule& q1, const QuadratureRule& q2, const KernelSpec& kernel,
                  std::size_t workers = 1) {
  return std::sqrt(std::max(mmd2(q1, q2, kernel, workers), 0.0));
}

/// Tensor Gauss-Legendre rule of the given order reweighted by
/// exp(log_weight); used for reference posteriors and grid oracles.
inline QuadratureRule reweighted_grid_rule(const std::function<double(std::span<const double>)>& log_weight,
                                           std::size_t order, std::size_t dimension,
                                           std::size_t workers = 1) {
  const auto grid = tensor_gauss_legendre(order, dimension);
  std::vector<double> lw(grid.size());
  parallel_for(grid.size(), workers, [&](std::size_t k) { lw[k] = log_weight(grid.point(k)); });
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : lw) mx = std::max(mx, v);
  if (!std::isfinite(mx)) throw DegenerateRuleError("reference grid: no point has positive weight");
  Eigen::VectorXd w(static_cast<Eigen::Index>(grid.size()));
  for (std::size_t k = 0; k < grid.size(); ++k)
    w[static_cast<Eigen::Index>(k)] = grid.weight(k) * std::exp(lw[k] - mx);
  return normalize(QuadratureRule(grid.points(), std::move(w)));
}

/// One discrepancy relative to the prior's discrepancy from the reference.
/// When the prior distance is below 1e-12 the absolute value is reported
/// and `relative` is false.
struct RelativeError {
  double value = 0.0;
  double absolute = 0.0;
  bool relative = true;
};

struct ErrorReport {
  RelativeError rmse, forstner, mmd_matern, mmd_gauss;
};

/// Relative errors against a fixed reference posterior grid rule. Mean and
/// covariance errors use the importance rule; MMDs use the surrogate's
/// pullback rule. Prior distances are computed once.
class ErrorEvaluator {
 public:
  static constexpr double kUndefinedBelow = 1e-12;

  ErrorEvaluator(QuadratureRule reference, const QuadratureRule& prior, double bandwidth = 0.05,
                 std::size_t workers = 1)
      : reference_(std::move(reference)), workers_(workers) {
    kernels_ = {KernelSpec{KernelFamily::Matern15, bandwidth}, KernelSpec{KernelFamily::SquaredExponential, bandwidth}};
    ref_moments_ = quadrature_moments(reference_);
    ref_self_ = detail::kernel_means(reference_, reference_, kernels_, workers_);
    const auto pm = weighted_moments(prior);
    prior_ = {(pm.mean - ref_moments_.mean).norm(), forstner(pm.covariance, ref_moments_.covariance)};
    const auto pk = mmd_pair(prior);
    prior_.push_back(pk[0]);
    prior_.push_back(pk[1]);
  }

  const QuadratureRule& reference() const noexcept { return reference_; }
  const Moments& reference_moments() const noexcept { return ref_moments_; }
  /// Prior distances: rmse, forstner, mmd_matern, mmd_gauss.
  const std::vector<double>& prior_distances() const noexcept { return prior_; }

  ErrorReport evaluate(const QuadratureRule& importance_rule, const QuadratureRule& surrogate_rule) const {
    const auto m = weighted_moments(importance_rule);
    const auto k = mmd_pair(surrogate_rule);
    ErrorReport r;
    r.rmse = scale((m.mean - ref_moments_.mean).norm(), prior_[0]);
    r.forstner = scale(forstner(m.covariance, ref_moments_.covariance), prior_[1]);
    r.mmd_matern = scale(k[0], prior_[2]);
    r.mmd_gauss = scale(k[1], prior_[3]);
    return r;
  }

 private:
  static RelativeError scale(double d, double prior) {
    if (prior < kUndefinedBelow) return {d, d, false};
    return {d / prior, d, true};
  }

  std::array<double, 2> mmd_pair(const QuadratureRule& q) const {
    const auto self = detail::kernel_means(q, q, kernels_, workers_);
    const auto cross = detail::kernel_means(q, reference_, kernels_, workers_);
    std::array<double, 2> out{};
    for (std::size_t i = 0; i < 2; ++i) out[i] = std::sqrt(std::max(self[i] - 2.0 * cross[i] + ref_self_[i], 0.0));
    return out;
  }

  QuadratureRule reference_;
  std::size_t workers_;
  std::vector<KernelSpec> kernels_;
  Moments ref_moments_;
  std::vector<double> ref_self_;
  std::vector<double> prior_;
};

}  // namespace mfat
