#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "errors.hpp"
#include "parallel.hpp"
#include "quadrature.hpp"
#include "transport.hpp"

namespace mfat {

/// Shape of the map family fitted at one step.
struct MapFamily {
  std::size_t dimension = 2;
  unsigned order = 3;
  std::size_t quad_nodes = 0;  // 0: 2*order+4 per panel
  std::size_t panels = MapComponent::kDefaultPanels;

  TriangularMap make() const { return TriangularMap(dimension, order, quad_nodes, panels); }
};

struct FitConfig {
  std::size_t steps = 1000;
  double step_size = 1e-3;
  double momentum = 0.9;
  double lambda = 1e-3;
  Eigen::VectorXd initial;  // empty: all zeros
  std::size_t workers = 1;

  void validate() const {
    if (steps < 1) throw ContractViolation("fit step count must be >= 1");
    if (!(step_size > 0.0)) throw ContractViolation("fit step size must be > 0");
    if (!(lambda >= 0.0)) throw ContractViolation("regularization must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractViolation("momentum must be in [0,1)");
  }
};

struct FitReport {
  std::vector<double> loss;       // unregularized loss per iterate, final iterate last
  std::vector<double> objective;  // loss + lambda |c|^2
  std::vector<double> grad_norm;  // norm of the objective gradient
  Eigen::VectorXd coefficients;
  double final_loss = 0.0;
};

struct FitResult {
  Surrogate surrogate;
  FitReport report;
};

/// Loss value, gradient and the indices of points whose log-density is not
/// finite (those make the loss +inf).
struct LossEval {
  double value = 0.0;
  Eigen::VectorXd gradient;
  std::vector<std::size_t> offending;
};

namespace detail {

inline void check_rule_for_loss(const QuadratureRule& rule, std::size_t dim) {
  if (!rule.normalized()) throw ContractViolation("loss requires a normalized rule");
  if (rule.dimension() != dim) throw ContractViolation("loss: rule/family dimension mismatch");
}

inline std::string describe_points(const QuadratureRule& rule, const std::vector<std::size_t>& idx) {
  std::string out;
  for (std::size_t i = 0; i < idx.size() && i < 5; ++i) {
    out += (i ? "; #" : "#") + std::to_string(idx[i]) + " (";
    for (std::size_t j = 0; j < rule.dimension(); ++j)
      out += (j ? "," : "") + io::format_double(rule.point(idx[i])[j]);
    out += ")";
  }
  if (idx.size() > 5) out += "; ... " + std::to_string(idx.size() - 5) + " more";
  return out;
}

}  // namespace detail

/// -sum_k w_k log(pullback density)(theta_k) for the surrogate whose newest
/// map carries the candidate coefficients. Zero-weight points are skipped.
inline LossEval evaluate_loss(const Surrogate& candidate, const QuadratureRule& rule,
                              bool want_gradient, std::size_t workers = 1) {
  detail::check_rule_for_loss(rule, candidate.dimension());
  const std::size_t n = rule.size();
  std::vector<double> values(n, 0.0);
  std::vector<Eigen::VectorXd> grads(want_gradient ? n : 0);
  parallel_for(n, workers, [&](std::size_t k) {
    if (rule.weight(k) == 0.0) return;
    if (want_gradient)
      values[k] = candidate.log_density_coefficient_gradient(rule.point(k), grads[k]);
    else
      values[k] = candidate.log_density(rule.point(k));
  });
  LossEval out;
  out.gradient = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(candidate.parameter_count()));
  for (std::size_t k = 0; k < n; ++k) {
    const double w = rule.weight(k);
    if (w == 0.0) continue;
    if (!std::isfinite(values[k])) {
      out.offending.push_back(k);
      continue;
    }
    out.value -= w * values[k];
    if (want_gradient) out.gradient -= w * grads[k];
  }
  if (!out.offending.empty()) out.value = std::numeric_limits<double>::infinity();
  return out;
}

inline Surrogate candidate_surrogate(const Eigen::VectorXd& c, const MapFamily& family,
                                     const Surrogate& reference) {
  TriangularMap m = family.make();
  m.set_coefficients(c);
  return Surrogate(reference, std::move(m));
}

inline double loss(const Eigen::VectorXd& c, const QuadratureRule& rule, const MapFamily& family,
                   const Surrogate& reference) {
  return evaluate_loss(candidate_surrogate(c, family, reference), rule, false).value;
}

inline Eigen::VectorXd loss_gradient(const Eigen::VectorXd& c, const QuadratureRule& rule,
                                     const MapFamily& family, const Surrogate& reference) {
  return evaluate_loss(candidate_surrogate(c, family, reference), rule, true).gradient;
}

/// Minimizes loss + lambda |c|^2 by Nesterov momentum with a fixed budget.
inline FitResult fit(const QuadratureRule& rule, const MapFamily& family, const Surrogate& reference,
                     const FitConfig& config) {
  config.validate();
  if (reference.dimension() != family.dimension)
    throw ContractViolation("fit: reference/family dimension mismatch");
  detail::check_rule_for_loss(rule, family.dimension);
  TriangularMap map = family.make();
  const auto p = static_cast<Eigen::Index>(map.parameter_count());
  Eigen::VectorXd c = config.initial.size() == 0 ? Eigen::VectorXd::Zero(p) : config.initial;
  if (c.size() != p) throw ContractViolation("fit: initial coefficient size mismatch");
  Surrogate s(reference, std::move(map));
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(p);
  FitReport report;
  report.loss.reserve(config.steps + 1);
  for (std::size_t it = 0; it <= config.steps; ++it) {
    s.set_outer_coefficients(c);
    const bool last = it == config.steps;
    LossEval le = evaluate_loss(s, rule, !last, config.workers);
    if (!std::isfinite(le.value))
      throw FitError("non-finite loss at fit iteration " + std::to_string(it) + "; offending points: " +
                         detail::describe_points(rule, le.offending),
                     it);
    const double obj = le.value + config.lambda * c.squaredNorm();
    report.loss.push_back(le.value);
    report.objective.push_back(obj);
    if (last) break;
    const Eigen::VectorXd g = le.gradient + 2.0 * config.lambda * c;
    report.grad_norm.push_back(g.norm());
    const double rho = config.momentum, eta = config.step_size;
    c += rho * rho * velocity - (1.0 + rho) * eta * g;
    velocity = rho * velocity - eta * g;
  }
  report.coefficients = c;
  report.final_loss = report.loss.back();
  return {std::move(s), std::move(report)};
}

}  // namespace mfat
