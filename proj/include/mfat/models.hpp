#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "io.hpp"

namespace mfat {

/// Dirichlet Poisson problem on the unit square, 5-point finite differences
/// on a uniform grid with `cells` intervals per side. The matrix is
/// factorized once; each solve is a pair of triangular substitutions.
class PoissonSolver {
 public:
  static constexpr double kResidualTolerance = 1e-10;

  explicit PoissonSolver(std::size_t cells) : n_(cells) {
    if (cells < 8) throw ContractViolation("Poisson grid needs at least 8 cells per side");
    const std::size_t m = n_ - 1;
    const double inv_h2 = static_cast<double>(n_ * n_);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(5 * m * m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const auto r = static_cast<int>(index(i, j));
        trip.emplace_back(r, r, 4.0 * inv_h2);
        if (i > 0) trip.emplace_back(r, static_cast<int>(index(i - 1, j)), -inv_h2);
        if (i + 1 < m) trip.emplace_back(r, static_cast<int>(index(i + 1, j)), -inv_h2);
        if (j > 0) trip.emplace_back(r, static_cast<int>(index(i, j - 1)), -inv_h2);
        if (j + 1 < m) trip.emplace_back(r, static_cast<int>(index(i, j + 1)), -inv_h2);
      }
    matrix_.resize(static_cast<Eigen::Index>(m * m), static_cast<Eigen::Index>(m * m));
    matrix_.setFromTriplets(trip.begin(), trip.end());
    ldlt_ = std::make_shared<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>>(matrix_);
    if (ldlt_->info() != Eigen::Success)
      throw SolverError("Poisson factorization failed at resolution " + std::to_string(n_));
  }

  std::size_t cells() const noexcept { return n_; }
  double spacing() const noexcept { return 1.0 / static_cast<double>(n_); }

  /// Solves Laplace(u) = f with u = 0 on the boundary. Returns nodal values
  /// u(i h, j h) for i, j in 0..cells.
  Eigen::MatrixXd solve(const std::function<double(double, double)>& f) const {
    const std::size_t m = n_ - 1;
    const double h = spacing();
    Eigen::VectorXd rhs(static_cast<Eigen::Index>(m * m));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        rhs[static_cast<Eigen::Index>(index(i, j))] =
            -f(static_cast<double>(i + 1) * h, static_cast<double>(j + 1) * h);
    const Eigen::VectorXd u = ldlt_->solve(rhs);
    const double scale = std::max(1.0, rhs.lpNorm<Eigen::Infinity>());
    const double resid = (matrix_ * u - rhs).lpNorm<Eigen::Infinity>() / scale;
    if (ldlt_->info() != Eigen::Success || !(resid <= kResidualTolerance))
      throw SolverError("Poisson solve residual " + io::format_double(resid) + " above tolerance");
    Eigen::MatrixXd field = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_ + 1),
                                                  static_cast<Eigen::Index>(n_ + 1));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        field(static_cast<Eigen::Index>(i + 1), static_cast<Eigen::Index>(j + 1)) =
            u[static_cast<Eigen::Index>(index(i, j))];
    return field;
  }

 private:
  std::size_t index(std::size_t i, std::size_t j) const { return i * (n_ - 1) + j; }

  std::size_t n_;
  Eigen::SparseMatrix<double> matrix_;
  std::shared_ptr<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>> ldlt_;
};

using Sensor = std::array<double, 2>;

/// Bilinear interpolation of a nodal field on the unit square.
inline Eigen::VectorXd observe(const Eigen::MatrixXd& field, const std::vector<Sensor>& sensors) {
  const auto n = field.rows() - 1;
  if (n < 1 || field.cols() != field.rows()) throw ContractViolation("observe: field must be square");
  Eigen::VectorXd out(static_cast<Eigen::Index>(sensors.size()));
  for (std::size_t s = 0; s < sensors.size(); ++s) {
    const double x = sensors[s][0], y = sensors[s][1];
    if (!(x >= 0.0 && x <= 1.0 && y >= 0.0 && y <= 1.0))
      throw ContractViolation("sensor outside the unit square");
    const double gx = x * static_cast<double>(n), gy = y * static_cast<double>(n);
    const auto i = std::min<Eigen::Index>(static_cast<Eigen::Index>(gx), n - 1);
    const auto j = std::min<Eigen::Index>(static_cast<Eigen::Index>(gy), n - 1);
    const double fx = gx - static_cast<double>(i), fy = gy - static_cast<double>(j);
    const double lo = field(i, j) + fx * (field(i + 1, j) - field(i, j));
    const double hi = field(i, j + 1) + fx * (field(i + 1, j + 1) - field(i, j + 1));
    out[static_cast<Eigen::Index>(s)] = lo + fy * (hi - lo);
  }
  return out;
}

/// Grid of 16 interior sensors at (0.2 i, 0.2 j), i, j = 1..4.
inline std::vector<Sensor> default_sensors() {
  std::vector<Sensor> s;
  for (int i = 1; i <= 4; ++i)
    for (int j = 1; j <= 4; ++j) s.push_back({0.2 * i, 0.2 * j});
  return s;
}

/// Source-inversion setup: Laplace(u) = A exp(-|x - theta|^2 / (2 alpha^2))
/// (+ a second source at `second_source` when generating multi-source
/// data). A defaults to 5 / (2 pi alpha^2), five times a unit-mass Gaussian;
/// `amplitude_override` replaces it.
struct DiffusionConfig {
  std::vector<std::size_t> resolutions{16, 64, 128};
  std::size_t data_resolution = 256;
  double alpha = 0.15;
  double noise_variance = 0.04;       // likelihood
  double data_noise_variance = 0.04;  // added to the synthetic data
  bool multi_source = false;
  std::array<double, 2> truth{0.25, 0.75};
  std::array<double, 2> second_source{0.85, 0.85};
  std::uint64_t data_seed = 1;
  std::optional<double> amplitude_override;

  double amplitude() const {
    return amplitude_override ? *amplitude_override : 5.0 / (2.0 * std::numbers::pi * alpha * alpha);
  }

  static DiffusionConfig single_source() { return {}; }

  static DiffusionConfig multi_source_config() {
    DiffusionConfig c;
    c.resolutions = {16, 32, 128};
    c.multi_source = true;
    c.truth = {0.15, 0.15};
    c.second_source = {0.85, 0.85};
    c.data_noise_variance = 0.0;
    return c;
  }

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (resolutions.empty()) p.push_back("resolutions: at least one fidelity required");
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
      if (resolutions[i] < 8) p.push_back("resolutions: each must be >= 8");
      if (i > 0 && resolutions[i] <= resolutions[i - 1]) p.push_back("resolutions: must be strictly increasing");
    }
    if (data_resolution < 8) p.push_back("data_resolution: must be >= 8");
    if (!(alpha > 0.0)) p.push_back("alpha: source width must be > 0");
    if (!(noise_variance > 0.0)) p.push_back("noise_variance: must be > 0");
    if (!(data_noise_variance >= 0.0)) p.push_back("data_noise_variance: must be >= 0");
    for (double c : truth)
      if (!(c >= 0.0 && c <= 1.0)) p.push_back("truth: coordinates must lie in [0,1]");
    for (double c : second_source)
      if (!(c >= 0.0 && c <= 1.0)) p.push_back("second_source: coordinates must lie in [0,1]");
    if (amplitude_override && !std::isfinite(*amplitude_override)) p.push_back("amplitude: must be finite");
    return p;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid diffusion problem:";
    for (const auto& s : p) msg += "\n  " + s;
    throw ContractViolation(msg);
  }
};

inline std::function<double(double, double)> gaussian_source(double amplitude, double alpha,
                                                             std::array<double, 2> center) {
  return [=](double x, double y) {
    const double dx = x - center[0], dy = y - center[1];
    return amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * alpha * alpha));
  };
}

/// Single-source forward map theta -> sensor readings at one resolution.
class DiffusionModel {
 public:
  DiffusionModel(std::size_t cells, double amplitude, double alpha, std::vector<Sensor> sensors)
      : solver_(std::make_shared<PoissonSolver>(cells)),
        amplitude_(amplitude),
        alpha_(alpha),
        sensors_(std::move(sensors)) {}

  Eigen::VectorXd operator()(std::span<const double> theta) const {
    if (theta.size() != 2) throw ContractViolation("diffusion model expects a 2D parameter");
    return observe(solver_->solve(gaussian_source(amplitude_, alpha_, {theta[0], theta[1]})), sensors_);
  }

  const PoissonSolver& solver() const { return *solver_; }

 private:
  std::shared_ptr<PoissonSolver> solver_;
  double amplitude_, alpha_;
  std::vector<Sensor> sensors_;
};

/// Synthetic observations at the data resolution, plus iid Gaussian noise
/// with the configured variance (none when zero).
inline Eigen::VectorXd generate_data(const DiffusionConfig& cfg) {
  cfg.validate();
  const PoissonSolver solver(cfg.data_resolution);
  const double a = cfg.amplitude();
  const auto s1 = gaussian_source(a, cfg.alpha, cfg.truth);
  std::function<double(double, double)> f = s1;
  if (cfg.multi_source) {
    const auto s2 = gaussian_source(a, cfg.alpha, cfg.second_source);
    f = [s1, s2](double x, double y) { return s1(x, y) + s2(x, y); };
  }
  Eigen::VectorXd y = observe(solver.solve(f), default_sensors());
  if (cfg.data_noise_variance > 0.0) {
    std::mt19937_64 rng(cfg.data_seed);
    std::normal_distribution<double> noise(0.0, std::sqrt(cfg.data_noise_variance));
    for (auto& v : y) v += noise(rng);
  }
  return y;
}

using LogLikelihoodFn = std::function<double(std::span<const double>)>;
using ForwardFn = std::function<Eigen::VectorXd(std::span<const double>)>;

/// Ordered likelihoods by fidelity, with one evaluation counter per level.
/// log_likelihood() counts; evaluate() does not (used for reference grids).
class LikelihoodHierarchy {
 public:
  /// Gaussian likelihoods -|G_l(theta) - y|^2 / (2 sigma^2).
  LikelihoodHierarchy(std::vector<ForwardFn> models, Eigen::VectorXd data, double noise_variance,
                      std::size_t dimension = 2)
      : dim_(dimension), forwards_(std::move(models)), data_(std::move(data)), sigma2_(noise_variance) {
    if (forwards_.empty()) throw ContractViolation("hierarchy needs at least one fidelity");
    if (!(sigma2_ > 0.0)) throw ContractViolation("noise variance must be > 0");
    for (std::size_t l = 0; l < forwards_.size(); ++l) {
      auto g = forwards_[l];
      levels_.push_back([this, g](std::span<const double> th) {
        const Eigen::VectorXd r = g(th) - data_;
        if (r.size() != data_.size()) throw ContractViolation("forward model output size mismatch");
        return -r.squaredNorm() / (2.0 * sigma2_);
      });
    }
    init_counters();
  }

  /// Closed-form log-likelihoods.
  LikelihoodHierarchy(std::vector<LogLikelihoodFn> levels, std::size_t dimension)
      : dim_(dimension), levels_(std::move(levels)) {
    if (levels_.empty()) throw ContractViolation("hierarchy needs at least one fidelity");
    init_counters();
  }

  LikelihoodHierarchy(const LikelihoodHierarchy&) = delete;
  LikelihoodHierarchy& operator=(const LikelihoodHierarchy&) = delete;

  std::size_t fidelities() const noexcept { return levels_.size(); }
  std::size_t dimension() const noexcept { return dim_; }
  const Eigen::VectorXd& data() const noexcept { return data_; }
  double noise_variance() const noexcept { return sigma2_; }
  bool has_forward_models() const noexcept { return !forwards_.empty(); }

  double log_likelihood(std::size_t level, std::span<const double> theta) {
    const double v = evaluate(level, theta);
    counters_[level].fetch_add(1, std::memory_order_relaxed);
    return v;
  }

  double evaluate(std::size_t level, std::span<const double> theta) const {
    check(level, theta);
    try {
      const double v = levels_[level](theta);
      if (std::isnan(v)) throw SolverError("likelihood returned NaN");
      return v;
    } catch (const std::exception& e) {
      std::string where = "fidelity " + std::to_string(level + 1) + " at theta = (";
      for (std::size_t j = 0; j < theta.size(); ++j) where += (j ? "," : "") + io::format_double(theta[j]);
      throw SolverError(where + "): " + e.what());
    }
  }

  Eigen::VectorXd forward(std::size_t level, std::span<const double> theta) const {
    check(level, theta);
    if (forwards_.empty()) throw CapabilityError("hierarchy has no forward models");
    return forwards_[level](theta);
  }

  std::size_t count(std::size_t level) const { return counters_.at(level).load(); }
  std::vector<std::size_t> counts() const {
    std::vector<std::size_t> c;
    for (const auto& a : counters_) c.push_back(a.load());
    return c;
  }
  void reset_counts() {
    for (auto& a : counters_) a.store(0);
  }

 private:
  void init_counters() { counters_ = std::vector<std::atomic<std::size_t>>(levels_.size()); }

  void check(std::size_t level, std::span<const double> theta) const {
    if (level >= levels_.size()) throw ContractViolation("fidelity index out of range");
    if (theta.size() != dim_) throw ContractViolation("likelihood: parameter dimension mismatch");
    for (double v : theta)
      if (!(v >= 0.0 && v <= 1.0)) throw DomainError("likelihood: parameter outside [0,1]^d");
  }

  std::size_t dim_;
  std::vector<ForwardFn> forwards_;
  Eigen::VectorXd data_;
  double sigma2_ = 1.0;
  std::vector<LogLikelihoodFn> levels_;
  std::vector<std::atomic<std::size_t>> counters_;
};

/// Builds the finite-difference hierarchy for a diffusion configuration.
inline std::unique_ptr<LikelihoodHierarchy> make_diffusion_hierarchy(const DiffusionConfig& cfg,
                                                                     const Eigen::VectorXd& data) {
  cfg.validate();
  std::vector<ForwardFn> models;
  for (std::size_t r : cfg.resolutions) {
    auto m = std::make_shared<DiffusionModel>(r, cfg.amplitude(), cfg.alpha, default_sensors());
    models.push_back([m](std::span<const double> th) { return (*m)(th); });
  }
  return std::make_unique<LikelihoodHierarchy>(std::move(models), data, cfg.noise_variance, 2);
}

/// Closed-form 2D test targets on [0,1]^2.
struct AnalyticTarget {
  std::string name;
  LogLikelihoodFn log_likelihood;
};

inline double log_gauss2(std::span<const double> x, double cx, double cy, double sd) {
  const double dx = x[0] - cx, dy = x[1] - cy;
  return -(dx * dx + dy * dy) / (2.0 * sd * sd);
}

inline std::vector<AnalyticTarget> analytic_targets() {
  std::vector<AnalyticTarget> out;
  out.push_back({"gaussian", [](std::span<const double> x) { return log_gauss2(x, 0.4, 0.6, 0.08); }});
  out.push_back({"mixture", [](std::span<const double> x) {
                   const double a = log_gauss2(x, 0.25, 0.25, 0.08);
                   const double b = log_gauss2(x, 0.75, 0.75, 0.08);
                   const double m = std::max(a, b);
                   return m + std::log(std::exp(a - m) + std::exp(b - m));
                 }});
  out.push_back({"banana", [](std::span<const double> x) {
                   const double u = (x[0] - 0.5) / 0.2;
                   const double v = (x[1] - 0.3 - 2.0 * (x[0] - 0.5) * (x[0] - 0.5)) / 0.05;
                   return -0.5 * (u * u + v * v);
                 }});
  return out;
}

inline AnalyticTarget analytic_target(const std::string& name) {
  for (auto& t : analytic_targets())
    if (t.name == name) return t;
  throw ContractViolation("unknown analytic target '" + name + "'");
}

inline std::unique_ptr<LikelihoodHierarchy> make_analytic_hierarchy(const std::string& name) {
  return std::make_unique<LikelihoodHierarchy>(std::vector<LogLikelihoodFn>{analytic_target(name).log_likelihood},
                                               2);
}

}  // namespace mfat
