#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cache.hpp"
#include "errors.hpp"
#include "metrics.hpp"
#include "mis.hpp"
#include "models.hpp"
#include "objective.hpp"
#include "parallel.hpp"
#include "quadrature.hpp"
#include "transport.hpp"

namespace mfat {

struct AnnealConfig {
  std::vector<double> thresholds{1.0};  // t_l per fidelity, strictly increasing to 1
  std::vector<std::size_t> samples{25};  // n_j: one entry, or one per step
  /// Planned steps per fidelity; the last planned step of a fidelity is
  /// forced to its threshold. Empty: adaptive (advance once beta hits t_l).
  std::vector<std::size_t> steps_per_fidelity;
  std::size_t refine_steps = 1;  // extra steps at beta = 1
  std::size_t max_steps = 64;    // adaptive-mode guard
  std::vector<unsigned> orders{3};      // M_j: one entry, or one per step
  std::vector<double> lambdas{1e-3};    // one entry, or one per step
  bool order_policy = false;            // shrink orders for low rESS
  std::size_t candidates = 40;
  double discount = 0.8;
  double ress_floor = 0.5;
  double gamma = 2.0;
  FitConfig fit;
  std::size_t quad_nodes = 0;
  std::size_t panels = MapComponent::kDefaultPanels;
  std::size_t error_points = 4096;  // pullback points for MMD
  std::uint64_t seed = 1;
  std::size_t workers = 1;

  bool planned() const noexcept { return !steps_per_fidelity.empty(); }

  std::size_t planned_steps() const {
    std::size_t s = refine_steps;
    for (auto k : steps_per_fidelity) s += k;
    return s;
  }

  template <class T>
  static const T& pick(const std::vector<T>& v, std::size_t j) {
    return v[std::min(j, v.size() - 1)];
  }

  std::size_t samples_at(std::size_t j) const { return pick(samples, j); }
  unsigned order_at(std::size_t j) const { return pick(orders, j); }
  double lambda_at(std::size_t j) const { return pick(lambdas, j); }

  /// Every problem with the configuration, in a stable order.
  std::vector<std::string> problems(std::size_t fidelities) const {
    std::vector<std::string> p;
    if (thresholds.size() != fidelities)
      p.push_back("thresholds: need one per fidelity (" + std::to_string(fidelities) + "), got " +
                  std::to_string(thresholds.size()));
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (!(thresholds[i] > 0.0 && thresholds[i] <= 1.0)) p.push_back("thresholds: values must lie in (0,1]");
      if (i > 0 && !(thresholds[i] > thresholds[i - 1])) p.push_back("thresholds: must be strictly increasing");
    }
    if (!thresholds.empty() && thresholds.back() != 1.0) p.push_back("thresholds: last threshold must be 1");
    if (samples.empty()) p.push_back("samples: at least one entry required");
    for (auto n : samples)
      if (n < 2) p.push_back("samples: each step needs at least 2 points");
    if (orders.empty()) p.push_back("orders: at least one entry required");
    for (auto m : orders)
      if (m < 1 || m > LegendreTable::kMaxOrder) p.push_back("orders: each order must lie in [1, 31]");
    if (lambdas.empty()) p.push_back("lambdas: at least one entry required");
    for (double l : lambdas)
      if (!(l >= 0.0)) p.push_back("lambdas: must be >= 0");
    if (planned()) {
      if (steps_per_fidelity.size() != fidelities)
        p.push_back("steps_per_fidelity: need one entry per fidelity");
      for (auto k : steps_per_fidelity)
        if (k < 1) p.push_back("steps_per_fidelity: each fidelity needs at least one step");
      const std::size_t total = planned_steps();
      if (samples.size() != 1 && samples.size() != total)
        p.push_back("samples: length must be 1 or the planned step count " + std::to_string(total));
      if (orders.size() != 1 && orders.size() != total)
        p.push_back("orders: length must be 1 or the planned step count " + std::to_string(total));
      if (lambdas.size() != 1 && lambdas.size() != total)
        p.push_back("lambdas: length must be 1 or the planned step count " + std::to_string(total));
    } else if (max_steps < 1) {
      p.push_back("max_steps: must be >= 1");
    }
    if (candidates < 2) p.push_back("candidates: need at least 2");
    if (!(discount > 0.0 && discount < 1.0)) p.push_back("discount: must lie in (0,1)");
    if (!(ress_floor > 0.0 && ress_floor < 1.0)) p.push_back("ress_floor: must lie in (0,1)");
    if (!(gamma > 0.0)) p.push_back("gamma: must be > 0");
    try {
      fit.validate();
    } catch (const std::exception& e) {
      p.push_back(std::string("fit: ") + e.what());
    }
    if (panels < 1) p.push_back("panels: must be >= 1");
    if (error_points < 2) p.push_back("error_points: must be >= 2");
    if (workers < 1) p.push_back("workers: must be >= 1");
    return p;
  }

  void validate(std::size_t fidelities) const {
    const auto p = problems(fidelities);
    if (p.empty()) return;
    std::string msg = "invalid annealing configuration:";
    for (const auto& s : p) msg += "\n  " + s;
    throw ContractViolation(msg);
  }
};

/// Optional order policy: one order lower for rESS below 0.3, two below 0.1.
inline unsigned order_for_ress(unsigned order, double ress) {
  const unsigned drop = ress < 0.1 ? 2 : ress < 0.3 ? 1 : 0;
  return std::max(1u, order > drop ? order - drop : 1u);
}

struct BetaChoice {
  double beta = 0.0;
  QuadratureRule rule;
  double ress = 0.0;
  bool forced = false;   // no candidate met the threshold; smallest increment taken
  bool stalled = false;  // no candidate above beta_prev below the cap
  double threshold = 0.0;
};

/// Largest candidate q/N (or the cap) in [beta_prev, cap] whose rule meets
/// rESS >= max(discount * r_prev, floor). Builds rules from the precompute
/// only, so no likelihood is evaluated.
inline BetaChoice choose_beta(const MisPrecompute& pre, double beta_prev, double r_prev, double cap,
                              const AnnealConfig& cfg) {
  if (!(beta_prev >= 0.0 && beta_prev <= cap)) throw ContractViolation("choose_beta: beta_prev outside [0, cap]");
  const double threshold = std::max(cfg.discount * r_prev, cfg.ress_floor);
  std::vector<double> cands{cap};
  for (std::size_t q = 1; q <= cfg.candidates; ++q) {
    const double b = static_cast<double>(q) / static_cast<double>(cfg.candidates);
    if (b >= beta_prev && b < cap) cands.push_back(b);
  }
  std::sort(cands.begin(), cands.end(), std::greater<>());
  cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
  if (cands.back() > beta_prev && beta_prev > 0.0) {
    // beta_prev itself stays admissible when it is off the grid.
    cands.push_back(beta_prev);
  }
  for (double b : cands) {
    try {
      auto rule = pre.rule(b);
      const double r = ress(rule);
      if (r >= threshold) return {b, std::move(rule), r, false, false, threshold};
    } catch (const DegenerateRuleError&) {
    }
  }
  double smallest = cap;
  bool any = false;
  for (double b : cands)
    if (b > beta_prev) {
      smallest = std::min(smallest, b);
      any = true;
    }
  if (any) {
    auto rule = pre.rule(smallest);
    const double r = ress(rule);
    return {smallest, std::move(rule), r, true, false, threshold};
  }
  auto rule = pre.rule(beta_prev);
  const double r = ress(rule);
  return {beta_prev, std::move(rule), r, false, true, threshold};
}

struct StepDiagnostics {
  std::size_t step = 0;
  std::size_t fidelity = 0;  // 0-based
  double beta = 0.0;
  std::size_t parameters = 0;
  unsigned order = 0;
  double ress = 0.0;
  std::size_t rule_size = 0;
  std::size_t new_evals = 0;  // likelihood requests at this step (n_j)
  std::vector<std::size_t> cumulative;  // requests per fidelity so far
  std::size_t search_evals = 0;         // model calls during the beta search
  bool forced = false, stalled = false, below_floor = false;
  double fit_loss = 0.0;
  std::optional<ErrorReport> errors;

  std::size_t cumulative_total() const {
    std::size_t s = 0;
    for (auto c : cumulative) s += c;
    return s;
  }
};

/// Failure inside an annealing step; the annealer keeps the state from
/// before the step so completed work can be persisted.
class AnnealError : public std::runtime_error {
 public:
  AnnealError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Everything needed to continue a run after step `next_step - 1`.
struct AnnealState {
  std::size_t next_step = 0;
  std::size_t level = 0;     // fidelity of the last completed step
  std::size_t in_level = 0;  // steps completed at that fidelity
  double beta = 0.0;
  double ress = 1.0;
  Surrogate previous{2};
  std::vector<StageMemo> memos;
  std::optional<QuadratureRule> rule;
  std::vector<StepDiagnostics> diagnostics;
  std::vector<std::size_t> cumulative;
  bool finished = false;
};

inline std::uint64_t step_seed(std::uint64_t seed, std::size_t step) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(step) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Generalized annealing over (fidelity, temperature), one step at a time.
class Annealer {
 public:
  Annealer(LikelihoodHierarchy& hierarchy, AnnealConfig config, EvaluationCache* cache = nullptr,
           const ErrorEvaluator* errors = nullptr)
      : h_(hierarchy), cfg_(std::move(config)), cache_(cache), errors_(errors) {
    cfg_.validate(h_.fidelities());
    state_.previous = Surrogate(h_.dimension());
    state_.cumulative.assign(h_.fidelities(), 0);
    if (errors_) error_base_ = rqmc_rule(h_.dimension(), cfg_.error_points, step_seed(cfg_.seed, 1u << 20));
  }

  const AnnealConfig& config() const noexcept { return cfg_; }
  const AnnealState& state() const noexcept { return state_; }
  void restore(AnnealState s) { state_ = std::move(s); }

  bool done() const noexcept { return state_.finished; }

  const Surrogate& surrogate() const noexcept { return state_.previous; }

  const StepDiagnostics& step() {
    if (done()) throw ContractViolation("annealer already finished");
    const std::size_t j = state_.next_step;
    try {
      advance(j);
    } catch (const AnnealError&) {
      throw;
    } catch (const std::exception& e) {
      throw AnnealError("step " + std::to_string(j) + ": " + e.what(), j);
    }
    return state_.diagnostics.back();
  }

  void run() {
    while (!done()) step();
  }

 private:
  std::size_t planned_level(std::size_t j) const {
    std::size_t acc = 0;
    for (std::size_t l = 0; l < cfg_.steps_per_fidelity.size(); ++l) {
      acc += cfg_.steps_per_fidelity[l];
      if (j < acc) return l;
    }
    return h_.fidelities() - 1;
  }

  Eigen::VectorXd evaluate(std::size_t level, const QuadratureRule& pts) {
    const std::size_t n = pts.size();
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    std::vector<std::size_t> missing;
    for (std::size_t k = 0; k < n; ++k) {
      const auto hit = cache_ ? cache_->find(level, pts.point(k)) : std::nullopt;
      if (hit)
        v[static_cast<Eigen::Index>(k)] = *hit;
      else
        missing.push_back(k);
    }
    parallel_for(missing.size(), cfg_.workers, [&](std::size_t i) {
      const auto k = missing[i];
      v[static_cast<Eigen::Index>(k)] = h_.log_likelihood(level, pts.point(k));
    });
    if (cache_)
      for (auto k : missing)
        if (!cache_->find(level, pts.point(k))) cache_->insert(level, pts.point(k), v[static_cast<Eigen::Index>(k)]);
    return v;
  }

  void advance(std::size_t j) {
    AnnealState& s = state_;
    const std::size_t last = h_.fidelities() - 1;
    std::size_t level;
    bool refine;
    if (cfg_.planned()) {
      level = planned_level(j);
      refine = j >= cfg_.planned_steps() - cfg_.refine_steps;
    } else {
      level = s.level;
      if (j > 0 && s.beta >= cfg_.thresholds[s.level] && s.level < last) ++level;
      refine = level == last && s.beta >= 1.0;
    }
    const bool new_level = j == 0 || level != s.level;
    const double cap = cfg_.thresholds[level];
    const std::size_t in_level = new_level ? 0 : s.in_level;
    const bool force_cap =
        refine || (cfg_.planned() && in_level + 1 >= cfg_.steps_per_fidelity[level]);

    std::vector<StageMemo> memos = new_level ? std::vector<StageMemo>{} : s.memos;
    const Surrogate reference = new_level ? s.previous : Surrogate(h_.dimension());

    const std::size_t n = cfg_.samples_at(j);
    const auto base = s.previous.pullback_quadrature(rqmc_rule(h_.dimension(), n, step_seed(cfg_.seed, j)));
    const Eigen::VectorXd loglik = evaluate(level, base);
    memos.push_back(StageMemo{s.previous, base.points(), base.weights(), loglik, level});

    const auto calls_before = h_.counts();
    const MisPrecompute pre(memos, cfg_.gamma, cfg_.workers);
    BetaChoice choice = choose_beta(pre, std::min(s.beta, cap), s.ress, cap, cfg_);
    if (force_cap && choice.beta < cap) {
      choice.rule = pre.rule(cap);
      choice.ress = ress(choice.rule);
      choice.beta = cap;
      choice.forced = true;
    }
    std::size_t search_evals = 0;
    const auto calls_after = h_.counts();
    for (std::size_t l = 0; l < calls_after.size(); ++l) search_evals += calls_after[l] - calls_before[l];

    unsigned order = cfg_.order_at(j);
    if (cfg_.order_policy) order = order_for_ress(order, choice.ress);
    FitConfig fc = cfg_.fit;
    fc.lambda = cfg_.lambda_at(j);
    fc.workers = cfg_.workers;
    fc.initial = Eigen::VectorXd();
    const MapFamily family{h_.dimension(), order, cfg_.quad_nodes, cfg_.panels};
    FitResult fitted = fit(choice.rule, family, reference, fc);

    StepDiagnostics d;
    d.step = j;
    d.fidelity = level;
    d.beta = choice.beta;
    d.parameters = fitted.surrogate.parameter_count();
    d.order = order;
    d.ress = choice.ress;
    d.rule_size = choice.rule.size();
    d.new_evals = n;
    d.search_evals = search_evals;
    d.forced = choice.forced;
    d.stalled = choice.stalled;
    d.below_floor = choice.ress < cfg_.ress_floor && !new_level;
    d.fit_loss = fitted.report.final_loss;
    if (errors_) d.errors = errors_->evaluate(choice.rule, fitted.surrogate.pullback_quadrature(error_base_));

    // Commit.
    s.cumulative[level] += n;
    d.cumulative = s.cumulative;
    s.next_step = j + 1;
    s.level = level;
    s.in_level = in_level + 1;
    s.beta = choice.beta;
    s.ress = choice.ress;
    s.previous = std::move(fitted.surrogate);
    s.memos = std::move(memos);
    s.rule = std::move(choice.rule);
    s.diagnostics.push_back(std::move(d));
    if (cfg_.planned())
      s.finished = s.next_step >= cfg_.planned_steps();
    else
      s.finished = s.next_step >= cfg_.max_steps ||
                   (level == last && s.beta >= 1.0 && count_refines() >= cfg_.refine_steps);
  }

  std::size_t count_refines() const {
    // Steps at the top fidelity after the first one that reached beta = 1.
    std::size_t r = 0;
    bool reached = false;
    for (const auto& d : state_.diagnostics) {
      if (d.fidelity != h_.fidelities() - 1 || d.beta < 1.0) continue;
      if (reached) ++r;
      reached = true;
    }
    return r;
  }

  LikelihoodHierarchy& h_;
  AnnealConfig cfg_;
  EvaluationCache* cache_;
  const ErrorEvaluator* errors_;
  QuadratureRule error_base_;
  AnnealState state_;
};

struct AnnealResult {
  Surrogate surrogate;
  QuadratureRule rule;
  std::vector<StepDiagnostics> diagnostics;
  std::vector<StageMemo> memos;
};

/// Runs the whole schedule.
inline AnnealResult anneal(LikelihoodHierarchy& hierarchy, const AnnealConfig& config,
                           EvaluationCache* cache = nullptr, const ErrorEvaluator* errors = nullptr) {
  Annealer a(hierarchy, config, cache, errors);
  a.run();
  const auto& s = a.state();
  return {s.previous, *s.rule, s.diagnostics, s.memos};
}

}  // namespace mfat
