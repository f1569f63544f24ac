#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "io.hpp"
#include "sobol.hpp"

namespace mfat {

/// Row-major so each point is a contiguous span.
using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Points in [0,1]^d with non-negative weights.
class QuadratureRule {
 public:
  static constexpr double kNormalizationTolerance = 1e-12;

  QuadratureRule() = default;

  QuadratureRule(PointMatrix points, Eigen::VectorXd weights, bool normalized = false)
      : points_(std::move(points)), weights_(std::move(weights)), normalized_(normalized) {
    if (points_.rows() == 0) throw ContractViolation("quadrature rule needs at least one point");
    if (points_.rows() != weights_.size())
      throw ContractViolation("quadrature rule: " + std::to_string(points_.rows()) + " points but " +
                              std::to_string(weights_.size()) + " weights");
    if (points_.cols() == 0) throw ContractViolation("quadrature rule dimension must be >= 1");
    for (Eigen::Index k = 0; k < points_.size(); ++k) {
      const double x = points_.data()[k];
      if (!(x >= 0.0 && x <= 1.0))
        throw ContractViolation("quadrature point coordinate " + io::format_double(x) +
                                " outside [0,1]");
    }
    for (Eigen::Index k = 0; k < weights_.size(); ++k)
      if (!(weights_[k] >= 0.0) || !std::isfinite(weights_[k]))
        throw ContractViolation("quadrature weight " + io::format_double(weights_[k]) +
                                " is negative or non-finite");
    if (normalized_ && std::abs(weights_.sum() - 1.0) > kNormalizationTolerance)
      throw ContractViolation("rule flagged normalized but weights sum to " +
                              io::format_double(weights_.sum()));
  }

  std::size_t size() const noexcept { return static_cast<std::size_t>(points_.rows()); }
  std::size_t dimension() const noexcept { return static_cast<std::size_t>(points_.cols()); }
  bool normalized() const noexcept { return normalized_; }

  const PointMatrix& points() const noexcept { return points_; }
  const Eigen::VectorXd& weights() const noexcept { return weights_; }

  std::span<const double> point(std::size_t k) const {
    return {points_.data() + k * dimension(), dimension()};
  }
  double weight(std::size_t k) const { return weights_[static_cast<Eigen::Index>(k)]; }

 private:
  PointMatrix points_;
  Eigen::VectorXd weights_;
  bool normalized_ = false;
};

/// Divides weights by their sum.
inline QuadratureRule normalize(const QuadratureRule& rule) {
  const double total = rule.weights().sum();
  if (!(total > 0.0) || !std::isfinite(total))
    throw DegenerateRuleError("cannot normalize quadrature rule with weight sum " +
                              io::format_double(total));
  Eigen::VectorXd w = rule.weights() / total;
  // Renormalize once more so the sum is 1 to rounding even for wide dynamic range.
  w /= w.sum();
  return QuadratureRule(rule.points(), std::move(w), true);
}

/// Relative effective sample size (N * sum w^2)^-1 of a normalized rule.
inline double ress(const QuadratureRule& rule) {
  if (!rule.normalized()) throw ContractViolation("ress requires a normalized rule");
  const double n = static_cast<double>(rule.size());
  return 1.0 / (n * rule.weights().squaredNorm());
}

/// Candidate-count padding for the randomized QMC rule: smallest prime base
/// b > d and smallest power p with b^p > n.
struct RqmcPadding {
  std::uint64_t base;
  unsigned power;
  std::uint64_t candidates;  // b^p
};

inline RqmcPadding rqmc_padding(std::size_t d, std::size_t n) {
  auto is_prime = [](std::uint64_t v) {
    if (v < 2) return false;
    for (std::uint64_t f = 2; f * f <= v; ++f)
      if (v % f == 0) return false;
    return true;
  };
  std::uint64_t b = d + 1;
  while (!is_prime(b)) ++b;
  unsigned p = 1;
  std::uint64_t bp = b;
  while (bp <= n) {
    bp *= b;
    ++p;
  }
  return {b, p, bp};
}

/// n equal-weight points from an Owen-scrambled Sobol' sequence.
///
/// The points are the first n of the b^p padded candidates (see
/// rqmc_padding), so rules sharing a seed are prefixes of one another.
inline QuadratureRule rqmc_rule(std::size_t d, std::size_t n, std::uint64_t seed) {
  if (d == 0 || n == 0) throw ContractViolation("rqmc_rule requires d >= 1 and n >= 1");
  if (n > std::numeric_limits<std::uint32_t>::max())
    throw CapabilityError("rqmc_rule supports at most 2^32-1 points");
  const SobolSequence sobol(d, true, seed);
  PointMatrix pts(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < d; ++j)
      pts(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) =
          sobol.coordinate(static_cast<std::uint32_t>(k), j);
  Eigen::VectorXd w = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), 1.0 / n);
  w /= w.sum();
  return QuadratureRule(std::move(pts), std::move(w), true);
}

/// Equal-weight i.i.d. uniform points (used as a Monte Carlo baseline).
inline QuadratureRule pseudo_random_rule(std::size_t d, std::size_t n, std::uint64_t seed) {
  if (d == 0 || n == 0) throw ContractViolation("pseudo_random_rule requires d >= 1 and n >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  PointMatrix pts(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < pts.size(); ++k) pts.data()[k] = unif(rng);
  Eigen::VectorXd w = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), 1.0 / n);
  w /= w.sum();
  return QuadratureRule(std::move(pts), std::move(w), true);
}

struct GaussLegendre {
  std::vector<double> nodes;    // in (0,1)
  std::vector<double> weights;  // sum to 1
};

/// n-point Gauss-Legendre rule on [0,1] (Newton iteration on P_n).
inline GaussLegendre gauss_legendre(std::size_t n) {
  if (n == 0) throw ContractViolation("Gauss-Legendre order must be >= 1");
  GaussLegendre gl;
  gl.nodes.resize(n);
  gl.weights.resize(n);
  const std::size_t half = (n + 1) / 2;
  for (std::size_t i = 0; i < half; ++i) {
    double x = std::cos(std::numbers::pi * (static_cast<double>(i) + 0.75) /
                        (static_cast<double>(n) + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (std::size_t k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / static_cast<double>(k);
        p0 = p1;
        p1 = p2;
      }
      dp = static_cast<double>(n) * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    gl.nodes[i] = 0.5 * (1.0 - x);
    gl.nodes[n - 1 - i] = 0.5 * (1.0 + x);
    gl.weights[i] = 0.5 * w;
    gl.weights[n - 1 - i] = 0.5 * w;
  }
  if (n % 2 == 1) gl.nodes[n / 2] = 0.5;
  return gl;
}

/// Tensor-product Gauss-Legendre rule with `order` nodes per axis.
inline QuadratureRule tensor_gauss_legendre(std::size_t order, std::size_t d) {
  const auto gl = gauss_legendre(order);
  std::size_t total = 1;
  for (std::size_t j = 0; j < d; ++j) total *= order;
  PointMatrix pts(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d));
  Eigen::VectorXd w(static_cast<Eigen::Index>(total));
  for (std::size_t k = 0; k < total; ++k) {
    std::size_t rem = k;
    double wk = 1.0;
    for (std::size_t j = d; j-- > 0;) {
      const std::size_t i = rem % order;
      rem /= order;
      pts(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = gl.nodes[i];
      wk *= gl.weights[i];
    }
    w[static_cast<Eigen::Index>(k)] = wk;
  }
  w /= w.sum();
  return QuadratureRule(std::move(pts), std::move(w), true);
}

/// Columnar text: header `theta_1,...,theta_d,weight`, one point per row,
/// shortest round-trip decimals.
inline std::string to_csv(const QuadratureRule& rule) {
  std::string out;
  for (std::size_t j = 0; j < rule.dimension(); ++j) out += "theta_" + std::to_string(j + 1) + ",";
  out += "weight\n";
  for (std::size_t k = 0; k < rule.size(); ++k) {
    for (double x : rule.point(k)) out += io::format_double(x) + ",";
    out += io::format_double(rule.weight(k)) + "\n";
  }
  return out;
}

inline QuadratureRule rule_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty quadrature CSV");
  const auto header = io::split(line, ',');
  if (header.size() < 2 || header.back() != "weight")
    throw std::runtime_error("quadrature CSV header must end with 'weight'");
  const std::size_t d = header.size() - 1;
  std::vector<double> coords, weights;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = io::split(line, ',');
    if (fields.size() != d + 1) throw std::runtime_error("quadrature CSV row has wrong arity");
    for (std::size_t j = 0; j < d; ++j) coords.push_back(io::parse_double(fields[j]));
    weights.push_back(io::parse_double(fields[d]));
  }
  const auto n = static_cast<Eigen::Index>(weights.size());
  PointMatrix pts = Eigen::Map<PointMatrix>(coords.data(), n, static_cast<Eigen::Index>(d));
  Eigen::VectorXd w = Eigen::Map<Eigen::VectorXd>(weights.data(), n);
  const bool normalized = std::abs(w.sum() - 1.0) <= QuadratureRule::kNormalizationTolerance;
  return QuadratureRule(std::move(pts), std::move(w), normalized);
}

}  // namespace mfat
