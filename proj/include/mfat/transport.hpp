#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "io.hpp"
#include "legendre.hpp"
#include "quadrature.hpp"

namespace mfat {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

namespace detail {

inline double softplus(double g) {
  return g > 30.0 ? g + std::log1p(std::exp(-g)) : std::log1p(std::exp(g));
}

inline double log_softplus(double g) {
  if (g < -30.0) return g - 0.5 * std::exp(g);
  return std::log(softplus(g));
}

inline double sigmoid(double g) {
  if (g >= 0.0) return 1.0 / (1.0 + std::exp(-g));
  const double e = std::exp(g);
  return e / (1.0 + e);
}

/// softplus and sigmoid from a single exponential.
inline void softplus_sigmoid(double g, double& sp, double& sig) {
  const double e = std::exp(-std::abs(g));
  sp = std::max(g, 0.0) + std::log1p(e);
  sig = g >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
}

/// sigmoid(g) / softplus(g), the derivative of log softplus.
inline double dlog_softplus(double g) {
  if (g < -30.0) return 1.0 - 0.5 * std::exp(g);
  return sigmoid(g) / softplus(g);
}

inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

inline void check_in_cube(std::span<const double> x, const char* what) {
  for (double v : x)
    if (!(v >= 0.0 && v <= 1.0))
      throw DomainError(std::string(what) + ": coordinate " + io::format_double(v) +
                        " outside [0,1]");
}

/// Shifted-Legendre first and second derivatives at every full-panel node,
/// shared between components with the same (order, nodes, panels).
struct PanelBasis {
  std::size_t stride = 0;
  std::vector<double> d1, d2;  // [(panel * nodes + q) * stride + m]
};

inline std::shared_ptr<const PanelBasis> panel_basis(unsigned order, const GaussLegendre& gl,
                                                     std::size_t panels) {
  static std::mutex mu;
  static std::map<std::tuple<unsigned, std::size_t, std::size_t>, std::shared_ptr<const PanelBasis>> cache;
  const auto key = std::make_tuple(order, gl.nodes.size(), panels);
  std::lock_guard<std::mutex> lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  auto pb = std::make_shared<PanelBasis>();
  pb->stride = order + 1;
  const std::size_t n = gl.nodes.size();
  pb->d1.resize(panels * n * pb->stride);
  pb->d2.resize(panels * n * pb->stride);
  LegendreTable tab(order);
  for (std::size_t k = 0; k < panels; ++k)
    for (std::size_t q = 0; q < n; ++q) {
      const double a = static_cast<double>(k) / static_cast<double>(panels);
      const double b = static_cast<double>(k + 1) / static_cast<double>(panels);
      tab.evaluate(a + (b - a) * gl.nodes[q]);
      for (std::size_t m = 0; m < pb->stride; ++m) {
        pb->d1[(k * n + q) * pb->stride + m] = tab.d1[m];
        pb->d2[(k * n + q) * pb->stride + m] = tab.d2[m];
      }
    }
  cache.emplace(key, pb);
  return pb;
}

}  // namespace detail

/// Total-order multi-indices alpha in N^d with |alpha|_1 <= order and
/// alpha_d >= 1 (the indices whose basis survives differentiation in the
/// last coordinate).
class MultiIndexSet {
 public:
  MultiIndexSet() = default;

  MultiIndexSet(std::size_t dimension, unsigned order) : dim_(dimension), order_(order) {
    if (dimension == 0) throw ContractViolation("multi-index dimension must be >= 1");
    if (order > LegendreTable::kMaxOrder)
      throw CapabilityError("map order above " + std::to_string(LegendreTable::kMaxOrder) +
                            " is not supported");
    std::vector<unsigned> alpha(dimension, 0);
    enumerate(alpha, 0, order);
  }

  /// C(M+d, d) - C(M+d-1, d-1).
  static std::size_t expected_size(std::size_t dimension, unsigned order) {
    return detail::binomial(order + dimension, dimension) -
           detail::binomial(order + dimension - 1, dimension - 1);
  }

  std::size_t dimension() const noexcept { return dim_; }
  unsigned order() const noexcept { return order_; }
  std::size_t size() const noexcept { return last_.size(); }

  std::span<const unsigned> operator[](std::size_t k) const {
    return {data_.data() + k * dim_, dim_};
  }
  unsigned last(std::size_t k) const { return last_[k]; }

 private:
  void enumerate(std::vector<unsigned>& alpha, std::size_t j, unsigned remaining) {
    if (j + 1 == dim_) {
      for (unsigned a = 1; a <= remaining; ++a) {
        alpha[j] = a;
        data_.insert(data_.end(), alpha.begin(), alpha.end());
        last_.push_back(a);
      }
      alpha[j] = 0;
      return;
    }
    for (unsigned a = 0; a <= remaining; ++a) {
      alpha[j] = a;
      enumerate(alpha, j + 1, remaining - a);
    }
    alpha[j] = 0;
  }

  std::size_t dim_ = 0;
  unsigned order_ = 0;
  std::vector<unsigned> data_;
  std::vector<unsigned> last_;
};

/// Derivative-form basis: for each alpha, prod_{j<d} P~_{alpha_j}(x_j) times
/// d/dt P~_{alpha_d}(t) at t = x_d.
inline std::vector<double> basis_eval(const MultiIndexSet& set, std::span<const double> x) {
  if (x.size() != set.dimension()) throw ContractViolation("basis_eval: dimension mismatch");
  detail::check_in_cube(x, "basis_eval");
  std::vector<LegendreTable> tables(set.dimension(), LegendreTable(set.order()));
  for (std::size_t j = 0; j < x.size(); ++j) tables[j].evaluate(x[j]);
  std::vector<double> out(set.size());
  const std::size_t last = set.dimension() - 1;
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto alpha = set[k];
    double v = tables[last].d1[alpha[last]];
    for (std::size_t j = 0; j < last; ++j) v *= tables[j].value[alpha[j]];
    out[k] = v;
  }
  return out;
}

/// Everything one component evaluation can report. Gradient vectors are
/// empty unless requested.
struct ComponentEval {
  double value = 0.0;     // S(x) in [0,1]
  double log_diag = 0.0;  // log f(x) - log I(1)
  double diag = 0.0;      // d/dt of the computed S (quadrature-consistent)
  std::vector<double> d_value_dx, d_log_diag_dx;
  std::vector<double> d_value_dc, d_log_diag_dc;
};

/// One rectified-integral component S(x_{1:k}) = I(x_k) / I(1) with
/// I(s) = int_0^s softplus(g(x_{1:k-1}, t)) dt and g the derivative-form
/// Legendre expansion. Integrals use composite Gauss-Legendre on fixed
/// panels of [0,1]; the panel containing s is integrated up to s only.
class MapComponent {
 public:
  static constexpr std::size_t kDefaultPanels = 16;

  MapComponent() = default;

  /// quad_nodes = 0 selects 2*order+4 nodes per panel.
  MapComponent(std::size_t input_dim, unsigned order, std::size_t quad_nodes = 0,
               std::size_t panels = kDefaultPanels)
      : indices_(input_dim, order),
        coeffs_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(indices_.size()))),
        gl_(gauss_legendre(quad_nodes == 0 ? 2 * order + 4 : quad_nodes)),
        panels_(panels) {
    if (order == 0) throw ContractViolation("map order must be >= 1");
    if (panels == 0) throw ContractViolation("panel count must be >= 1");
    basis_ = detail::panel_basis(order, gl_, panels_);
  }

  std::size_t input_dim() const noexcept { return indices_.dimension(); }
  unsigned order() const noexcept { return indices_.order(); }
  std::size_t quad_nodes() const noexcept { return gl_.nodes.size(); }
  std::size_t panels() const noexcept { return panels_; }
  std::size_t parameter_count() const noexcept { return indices_.size(); }
  const MultiIndexSet& indices() const noexcept { return indices_; }

  const Eigen::VectorXd& coefficients() const noexcept { return coeffs_; }
  void set_coefficients(const Eigen::VectorXd& c) {
    if (c.size() != coeffs_.size()) throw ContractViolation("component coefficient size mismatch");
    coeffs_ = c;
  }

  double forward(std::span<const double> x) const { return evaluate(x, false, false).value; }

  ComponentEval evaluate(std::span<const double> x, bool want_x, bool want_c) const {
    if (x.size() != input_dim()) throw ContractViolation("component input dimension mismatch");
    detail::check_in_cube(x, "map component");
    const Prefix pre = prefix(x.first(input_dim() - 1), want_x);
    const double t = x.back();
    Integral at_one, at_t;
    integrate_both(pre, t, want_x, want_c, at_one, at_t);

    LegendreTable tab(order());
    tab.evaluate(t);
    const Point pt = point_values(pre, tab, want_x);

    ComponentEval ev;
    const double i1 = at_one.value;
    ev.value = t == 1.0 ? 1.0 : std::clamp(at_t.value / i1, 0.0, 1.0);
    ev.diag = at_t.derivative / i1;
    ev.log_diag = (i1 > 0.0 && std::isfinite(i1)) ? detail::log_softplus(pt.g) - std::log(i1)
                                                   : kNegInf;
    const double ratio = detail::dlog_softplus(pt.g);
    if (want_x) {
      const std::size_t np = input_dim() - 1;
      ev.d_value_dx.resize(input_dim());
      ev.d_log_diag_dx.resize(input_dim());
      for (std::size_t j = 0; j < np; ++j) {
        ev.d_value_dx[j] = (at_t.dx[j] - ev.value * at_one.dx[j]) / i1;
        ev.d_log_diag_dx[j] = ratio * pt.gx[j] - at_one.dx[j] / i1;
      }
      ev.d_value_dx[np] = ev.diag;
      ev.d_log_diag_dx[np] = ratio * pt.gt;
    }
    if (want_c) {
      const std::size_t p = parameter_count();
      ev.d_value_dc.resize(p);
      ev.d_log_diag_dc.resize(p);
      for (std::size_t k = 0; k < p; ++k) {
        const unsigned m = indices_.last(k);
        const double pa = pre.p_alpha[k];
        ev.d_value_dc[k] = pa * (at_t.gm[m] - ev.value * at_one.gm[m]) / i1;
        ev.d_log_diag_dc[k] = ratio * pa * tab.d1[m] - pa * at_one.gm[m] / i1;
      }
    }
    return ev;
  }

  /// Solves S(prefix, t) = z for t by safeguarded Newton with bisection
  /// fallback; absolute tolerance 1e-10 in t.
  double solve(std::span<const double> prefix_x, double z) const {
    if (prefix_x.size() + 1 != input_dim()) throw ContractViolation("solve: prefix size mismatch");
    detail::check_in_cube(prefix_x, "map inverse");
    if (!(z >= 0.0 && z <= 1.0)) throw DomainError("map inverse: target outside [0,1]");
    if (z == 0.0) return 0.0;
    if (z == 1.0) return 1.0;
    const Prefix pre = prefix(prefix_x, false);
    const double i1 = integrate(pre, 1.0, false, false, false).value;
    if (!(i1 > 0.0) || !std::isfinite(i1))
      throw InvariantError("map inverse: non-positive normalizing integral");
    double lo = 0.0, hi = 1.0;
    double t = z;
    double last_step = 1.0;
    for (int iter = 0; iter < kMaxInverseIterations; ++iter) {
      const Integral it = integrate(pre, t, false, false, true);
      const double resid = it.value / i1 - z;
      if (resid == 0.0) return t;
      if (resid > 0.0)
        hi = t;
      else
        lo = t;
      const double deriv = it.derivative / i1;
      double next = deriv > 0.0 ? t - resid / deriv : lo - 1.0;
      // Bisect when Newton leaves the bracket or stops halving the step.
      if (!(next > lo && next < hi) || std::abs(next - t) > 0.5 * last_step) next = 0.5 * (lo + hi);
      last_step = std::abs(next - t);
      t = next;
      if (last_step < kInverseTolerance || hi - lo < kInverseTolerance) return t;
    }
    throw InvariantError("map inverse did not converge within the iteration budget");
  }

  static constexpr double kInverseTolerance = 1e-10;
  static constexpr int kMaxInverseIterations = 100;

 private:
  struct Prefix {
    std::vector<double> p_alpha;   // prod_{j<last} P~_{alpha_j}(x_j)
    std::vector<double> a;         // A_m = sum_{alpha_last = m} c_alpha p_alpha
    std::vector<double> b;         // B_{j,m}, row j, stride order+1
  };

  struct Integral {
    double value = 0.0;       // I(s)
    double derivative = 0.0;  // dI/ds of the quadrature formula
    std::vector<double> gm;   // G_m(s) = s sum_q w_q sigmoid(g_q) P~'_m(s u_q)
    std::vector<double> dx;   // dI(s)/dx_j for prefix coordinates
  };

  struct Point {
    double g = 0.0, gt = 0.0;
    std::vector<double> gx;
  };

  Prefix prefix(std::span<const double> px, bool want_x) const {
    const std::size_t np = px.size();
    const std::size_t stride = order() + 1;
    std::vector<LegendreTable> tabs(np, LegendreTable(order()));
    for (std::size_t j = 0; j < np; ++j) tabs[j].evaluate(px[j]);
    Prefix pre;
    const std::size_t p = parameter_count();
    pre.p_alpha.resize(p);
    pre.a.assign(stride, 0.0);
    if (want_x) pre.b.assign(np * stride, 0.0);
    for (std::size_t k = 0; k < p; ++k) {
      const auto alpha = indices_[k];
      double v = 1.0;
      for (std::size_t j = 0; j < np; ++j) v *= tabs[j].value[alpha[j]];
      pre.p_alpha[k] = v;
      const double c = coeffs_[static_cast<Eigen::Index>(k)];
      const unsigned m = alpha[np];
      pre.a[m] += c * v;
      if (want_x) {
        for (std::size_t j = 0; j < np; ++j) {
          double dv = tabs[j].d1[alpha[j]];
          for (std::size_t i = 0; i < np; ++i)
            if (i != j) dv *= tabs[i].value[alpha[i]];
          pre.b[j * stride + m] += c * dv;
        }
      }
    }
    return pre;
  }

  Point point_values(const Prefix& pre, const LegendreTable& tab, bool want_x) const {
    const std::size_t stride = order() + 1;
    Point pt;
    for (std::size_t m = 1; m < stride; ++m) {
      pt.g += pre.a[m] * tab.d1[m];
      pt.gt += pre.a[m] * tab.d2[m];
    }
    if (want_x) {
      const std::size_t np = input_dim() - 1;
      pt.gx.assign(np, 0.0);
      for (std::size_t j = 0; j < np; ++j)
        for (std::size_t m = 1; m < stride; ++m) pt.gx[j] += pre.b[j * stride + m] * tab.d1[m];
    }
    return pt;
  }

  Integral integrate(const Prefix& pre, double s, bool want_x, bool want_c,
                     bool want_derivative) const {
    const std::size_t stride = order() + 1;
    Integral out;
    if (want_c) out.gm.assign(stride, 0.0);
    if (want_x) out.dx.assign(input_dim() - 1, 0.0);
    const double k_panels = static_cast<double>(panels_);
    std::size_t k = 0;
    while (k + 1 < panels_ && static_cast<double>(k + 1) / k_panels < s) {
      segment(pre, static_cast<double>(k) / k_panels, static_cast<double>(k + 1) / k_panels, want_x,
              want_c, false, out, k);
      ++k;
    }
    segment(pre, static_cast<double>(k) / k_panels, s, want_x, want_c, want_derivative, out);
    return out;
  }

  // I(1) and I(t) together; full panels below t are shared.
  void integrate_both(const Prefix& pre, double t, bool want_x, bool want_c, Integral& at_one,
                      Integral& at_t) const {
    const std::size_t stride = order() + 1;
    for (Integral* it : {&at_one, &at_t}) {
      if (want_c) it->gm.assign(stride, 0.0);
      if (want_x) it->dx.assign(input_dim() - 1, 0.0);
    }
    const double k_panels = static_cast<double>(panels_);
    Integral panel;
    std::size_t partial = panels_;  // index of the panel holding t
    for (std::size_t k = 0; k < panels_; ++k) {
      const double a = static_cast<double>(k) / k_panels;
      const double b = static_cast<double>(k + 1) / k_panels;
      const bool below_t = k + 1 < panels_ && b < t;
      if (!below_t && partial == panels_) partial = k;
      panel.value = panel.derivative = 0.0;
      panel.gm.assign(at_one.gm.size(), 0.0);
      panel.dx.assign(at_one.dx.size(), 0.0);
      segment(pre, a, b, want_x, want_c, t == 1.0 && k + 1 == panels_, panel, k);
      for (Integral* it : {&at_one, &at_t}) {
        if (it == &at_t && !below_t) break;
        it->value += panel.value;
        for (std::size_t m = 0; m < panel.gm.size(); ++m) it->gm[m] += panel.gm[m];
        for (std::size_t j = 0; j < panel.dx.size(); ++j) it->dx[j] += panel.dx[j];
      }
      if (t == 1.0 && k + 1 == panels_) at_one.derivative = panel.derivative;
    }
    if (t == 1.0) {
      at_t = at_one;
      return;
    }
    segment(pre, static_cast<double>(partial) / k_panels, t, want_x, want_c, true, at_t);
  }

  // Adds the Gauss-Legendre estimate over [a, b]; the derivative term is
  // d/db of that estimate. A full panel passes its index to reuse the
  // precomputed basis; partial segments evaluate it on the fly.
  void segment(const Prefix& pre, double a, double b, bool want_x, bool want_c,
               bool want_derivative, Integral& out,
               std::size_t panel = static_cast<std::size_t>(-1)) const {
    const std::size_t stride = order() + 1;
    const std::size_t np = input_dim() - 1;
    const std::size_t nodes = gl_.nodes.size();
    const double len = b - a;
    LegendreTable tab(order());
    const double* d1 = tab.d1.data();
    const double* d2 = tab.d2.data();
    const bool fixed = panel < panels_;
    for (std::size_t q = 0; q < nodes; ++q) {
      const double u = gl_.nodes[q];
      const double w = gl_.weights[q];
      if (fixed) {
        d1 = basis_->d1.data() + (panel * nodes + q) * stride;
        d2 = basis_->d2.data() + (panel * nodes + q) * stride;
      } else {
        tab.evaluate(a + len * u);
      }
      double g = 0.0, gt = 0.0;
      for (std::size_t m = 1; m < stride; ++m) {
        g += pre.a[m] * d1[m];
        if (want_derivative) gt += pre.a[m] * d2[m];
      }
      double sp, sig;
      detail::softplus_sigmoid(g, sp, sig);
      out.value += len * w * sp;
      if (!(want_c || want_x || want_derivative)) continue;
      if (want_derivative) out.derivative += w * (sp + len * u * sig * gt);
      if (want_c)
        for (std::size_t m = 1; m < stride; ++m) out.gm[m] += len * w * sig * d1[m];
      if (want_x)
        for (std::size_t j = 0; j < np; ++j) {
          double gx = 0.0;
          for (std::size_t m = 1; m < stride; ++m) gx += pre.b[j * stride + m] * d1[m];
          out.dx[j] += len * w * sig * gx;
        }
    }
  }

  MultiIndexSet indices_;
  Eigen::VectorXd coeffs_;
  GaussLegendre gl_;
  std::size_t panels_ = kDefaultPanels;
  std::shared_ptr<const detail::PanelBasis> basis_;
};

/// Evaluation of a whole triangular map at one point.
struct MapEval {
  Eigen::VectorXd z;
  double log_det = 0.0;
  Eigen::MatrixXd jacobian;        // lower triangular, when want_x
  Eigen::VectorXd grad_log_det_x;  // when want_x
  Eigen::VectorXd dz_dc;           // block k holds dz_k/dc_k, when want_c
  Eigen::VectorXd grad_log_det_c;  // when want_c
};

/// Lower-triangular monotone map of [0,1]^d; component k reads x_{1:k+1}.
class TriangularMap {
 public:
  TriangularMap() = default;

  TriangularMap(std::size_t dimension, unsigned order, std::size_t quad_nodes = 0,
                std::size_t panels = MapComponent::kDefaultPanels) {
    if (dimension == 0) throw ContractViolation("map dimension must be >= 1");
    for (std::size_t k = 0; k < dimension; ++k) comps_.emplace_back(k + 1, order, quad_nodes, panels);
    rebuild_offsets();
  }

  std::size_t dimension() const noexcept { return comps_.size(); }
  unsigned order() const noexcept { return comps_.empty() ? 0 : comps_.front().order(); }
  std::size_t quad_nodes() const noexcept { return comps_.empty() ? 0 : comps_.front().quad_nodes(); }
  std::size_t panels() const noexcept { return comps_.empty() ? 0 : comps_.front().panels(); }
  std::size_t parameter_count() const noexcept { return offsets_.empty() ? 0 : offsets_.back(); }
  const MapComponent& component(std::size_t k) const { return comps_[k]; }
  std::size_t offset(std::size_t k) const { return offsets_[k]; }

  Eigen::VectorXd coefficients() const {
    Eigen::VectorXd c(static_cast<Eigen::Index>(parameter_count()));
    for (std::size_t k = 0; k < comps_.size(); ++k)
      c.segment(static_cast<Eigen::Index>(offsets_[k]),
                static_cast<Eigen::Index>(comps_[k].parameter_count())) = comps_[k].coefficients();
    return c;
  }

  void set_coefficients(const Eigen::VectorXd& c) {
    if (static_cast<std::size_t>(c.size()) != parameter_count())
      throw ContractViolation("map coefficient size mismatch: expected " +
                              std::to_string(parameter_count()) + ", got " +
                              std::to_string(c.size()));
    for (std::size_t k = 0; k < comps_.size(); ++k)
      comps_[k].set_coefficients(c.segment(static_cast<Eigen::Index>(offsets_[k]),
                                           static_cast<Eigen::Index>(comps_[k].parameter_count())));
  }

  Eigen::VectorXd forward(std::span<const double> x) const {
    check_dim(x.size());
    Eigen::VectorXd z(static_cast<Eigen::Index>(dimension()));
    for (std::size_t k = 0; k < dimension(); ++k)
      z[static_cast<Eigen::Index>(k)] = comps_[k].forward(x.first(k + 1));
    return z;
  }

  Eigen::VectorXd inverse(std::span<const double> z) const {
    check_dim(z.size());
    Eigen::VectorXd x(static_cast<Eigen::Index>(dimension()));
    for (std::size_t k = 0; k < dimension(); ++k)
      x[static_cast<Eigen::Index>(k)] =
          comps_[k].solve(std::span<const double>(x.data(), k), z[k]);
    return x;
  }

  double log_det(std::span<const double> x) const { return evaluate(x, false, false).log_det; }

  MapEval evaluate(std::span<const double> x, bool want_x, bool want_c) const {
    check_dim(x.size());
    const auto d = static_cast<Eigen::Index>(dimension());
    MapEval ev;
    ev.z.resize(d);
    if (want_x) {
      ev.jacobian = Eigen::MatrixXd::Zero(d, d);
      ev.grad_log_det_x = Eigen::VectorXd::Zero(d);
    }
    if (want_c) {
      ev.dz_dc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(parameter_count()));
      ev.grad_log_det_c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(parameter_count()));
    }
    for (std::size_t k = 0; k < dimension(); ++k) {
      const auto ce = comps_[k].evaluate(x.first(k + 1), want_x, want_c);
      const auto ki = static_cast<Eigen::Index>(k);
      ev.z[ki] = ce.value;
      ev.log_det += ce.log_diag;
      if (want_x)
        for (std::size_t j = 0; j <= k; ++j) {
          ev.jacobian(ki, static_cast<Eigen::Index>(j)) = ce.d_value_dx[j];
          ev.grad_log_det_x[static_cast<Eigen::Index>(j)] += ce.d_log_diag_dx[j];
        }
      if (want_c)
        for (std::size_t a = 0; a < ce.d_value_dc.size(); ++a) {
          const auto idx = static_cast<Eigen::Index>(offsets_[k] + a);
          ev.dz_dc[idx] = ce.d_value_dc[a];
          ev.grad_log_det_c[idx] = ce.d_log_diag_dc[a];
        }
    }
    return ev;
  }

 private:
  void check_dim(std::size_t n) const {
    if (n != dimension())
      throw ContractViolation("map expects dimension " + std::to_string(dimension()) + ", got " +
                              std::to_string(n));
  }

  void rebuild_offsets() {
    offsets_.assign(1, 0);
    for (const auto& c : comps_) offsets_.push_back(offsets_.back() + c.parameter_count());
  }

  std::vector<MapComponent> comps_;
  std::vector<std::size_t> offsets_;
};

/// Normalized density on [0,1]^d obtained by pulling the uniform density
/// back through a chain of triangular maps. maps()[0] is applied last when
/// evaluating the density (innermost); maps().back() is the newest map.
class Surrogate {
 public:
  static constexpr int kFormatVersion = 1;

  explicit Surrogate(std::size_t dimension = 1) : dim_(dimension) {
    if (dimension == 0) throw ContractViolation("surrogate dimension must be >= 1");
  }

  /// Pullback of `reference` through `map`.
  Surrogate(const Surrogate& reference, TriangularMap map) : dim_(reference.dim_), maps_(reference.maps_) {
    if (map.dimension() != dim_) throw ContractViolation("surrogate/map dimension mismatch");
    maps_.push_back(std::move(map));
  }

  std::size_t dimension() const noexcept { return dim_; }
  std::size_t depth() const noexcept { return maps_.size(); }
  bool is_uniform() const noexcept { return maps_.empty(); }
  const std::vector<TriangularMap>& maps() const noexcept { return maps_; }

  /// The chain without its newest map.
  Surrogate reference() const {
    Surrogate r(dim_);
    if (!maps_.empty()) r.maps_.assign(maps_.begin(), maps_.end() - 1);
    return r;
  }

  std::size_t parameter_count() const noexcept {
    return maps_.empty() ? 0 : maps_.back().parameter_count();
  }

  /// log density at theta; -inf on the closed-cube boundary or where a
  /// Jacobian diagonal underflows.
  double log_density(std::span<const double> theta) const {
    check_point(theta);
    if (on_boundary(theta)) return kNegInf;
    return chain_log_density(maps_.size(), theta, nullptr);
  }

  double log_density(std::span<const double> theta, Eigen::VectorXd& grad) const {
    check_point(theta);
    grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
    if (on_boundary(theta)) return kNegInf;
    return chain_log_density(maps_.size(), theta, &grad);
  }

  /// Log density of the chain truncated to its first `levels` maps, with
  /// optional spatial gradient. Boundary points are evaluated, not rejected.
  double chain_log_density(std::size_t levels, std::span<const double> theta,
                           Eigen::VectorXd* grad) const {
    const auto d = static_cast<Eigen::Index>(dim_);
    Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(theta.data(), d);
    Eigen::MatrixXd jacc;
    if (grad) {
      jacc = Eigen::MatrixXd::Identity(d, d);
      grad->setZero(d);
    }
    double value = 0.0;
    for (std::size_t i = levels; i-- > 0;) {
      const auto ev = maps_[i].evaluate(std::span<const double>(x.data(), dim_), grad != nullptr, false);
      if (!std::isfinite(ev.log_det)) {
        if (grad) grad->setZero();
        return kNegInf;
      }
      value += ev.log_det;
      if (grad) {
        *grad += jacc.transpose() * ev.grad_log_det_x;
        jacc = ev.jacobian * jacc;
      }
      x = ev.z;
    }
    return value;
  }

  /// Gradient of log_density with respect to the newest map's coefficients,
  /// holding the rest of the chain fixed.
  Eigen::VectorXd grad_log_density_coefficients(std::span<const double> theta) const {
    Eigen::VectorXd g;
    log_density_coefficient_gradient(theta, g);
    return g;
  }

  /// log_density together with its newest-map coefficient gradient.
  double log_density_coefficient_gradient(std::span<const double> theta, Eigen::VectorXd& grad) const {
    check_point(theta);
    grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(parameter_count()));
    if (maps_.empty()) return on_boundary(theta) ? kNegInf : 0.0;
    const auto& outer = maps_.back();
    const auto ev = outer.evaluate(theta, false, true);
    Eigen::VectorXd ref_grad;
    const double ref =
        chain_log_density(maps_.size() - 1, std::span<const double>(ev.z.data(), dim_), &ref_grad);
    grad = ev.grad_log_det_c;
    for (std::size_t k = 0; k < dim_; ++k) {
      const auto off = static_cast<Eigen::Index>(outer.offset(k));
      const auto len = static_cast<Eigen::Index>(outer.component(k).parameter_count());
      grad.segment(off, len) += ref_grad[static_cast<Eigen::Index>(k)] * ev.dz_dc.segment(off, len);
    }
    if (on_boundary(theta) || !std::isfinite(ev.log_det)) return kNegInf;
    return ref + ev.log_det;
  }

  /// Replaces the newest map's coefficients.
  void set_outer_coefficients(const Eigen::VectorXd& c) {
    if (maps_.empty()) throw ContractViolation("uniform surrogate has no coefficients");
    maps_.back().set_coefficients(c);
  }

  /// Pushes a uniform base point through the inverse chain.
  Eigen::VectorXd transport(std::span<const double> u) const {
    check_point(u);
    Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(u.data(), static_cast<Eigen::Index>(dim_));
    for (const auto& m : maps_) x = m.inverse(std::span<const double>(x.data(), dim_));
    return x;
  }

  /// Transported quadrature: points pushed through the inverse chain,
  /// weights unchanged.
  QuadratureRule pullback_quadrature(const QuadratureRule& base) const {
    if (base.dimension() != dim_) throw ContractViolation("pullback_quadrature: dimension mismatch");
    PointMatrix pts(base.points().rows(), base.points().cols());
    for (std::size_t k = 0; k < base.size(); ++k)
      pts.row(static_cast<Eigen::Index>(k)) = transport(base.point(k)).transpose();
    return QuadratureRule(std::move(pts), base.weights(), base.normalized());
  }

  PointMatrix sample(std::size_t n, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    PointMatrix pts(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim_));
    Eigen::VectorXd u(static_cast<Eigen::Index>(dim_));
    for (std::size_t k = 0; k < n; ++k) {
      for (auto& v : u) v = unif(rng);
      pts.row(static_cast<Eigen::Index>(k)) =
          transport(std::span<const double>(u.data(), dim_)).transpose();
    }
    return pts;
  }

  /// Versioned text form: dimension, chain depth, then per map its order,
  /// node count and per-component coefficient lists (innermost map first).
  std::string serialize() const {
    std::string out = "mfat-surrogate " + std::to_string(kFormatVersion) + "\n";
    out += "dimension " + std::to_string(dim_) + "\n";
    out += "depth " + std::to_string(maps_.size()) + "\n";
    for (const auto& m : maps_) {
      out += "map order " + std::to_string(m.order()) + " nodes " + std::to_string(m.quad_nodes()) +
             " panels " + std::to_string(m.panels()) + "\n";
      for (std::size_t k = 0; k < m.dimension(); ++k) {
        const auto& c = m.component(k).coefficients();
        out += "component " + std::to_string(k + 1) + " " + std::to_string(c.size());
        for (double v : c) out += " " + io::format_double(v);
        out += "\n";
      }
    }
    return out;
  }

  static Surrogate deserialize(const std::string& text) {
    std::istringstream in(text);
    std::string tag;
    int version = 0;
    std::size_t dim = 0, depth = 0;
    if (!(in >> tag >> version) || tag != "mfat-surrogate")
      throw std::runtime_error("not a serialized surrogate");
    if (version != kFormatVersion)
      throw std::runtime_error("unsupported surrogate format version " + std::to_string(version));
    if (!(in >> tag >> dim) || tag != "dimension") throw std::runtime_error("surrogate: missing dimension");
    if (!(in >> tag >> depth) || tag != "depth") throw std::runtime_error("surrogate: missing depth");
    Surrogate s(dim);
    for (std::size_t i = 0; i < depth; ++i) {
      std::string kw_order, kw_nodes, kw_panels;
      unsigned order = 0;
      std::size_t nodes = 0, panels = 0;
      if (!(in >> tag >> kw_order >> order >> kw_nodes >> nodes >> kw_panels >> panels) ||
          tag != "map" || kw_order != "order" || kw_nodes != "nodes" || kw_panels != "panels")
        throw std::runtime_error("surrogate: malformed map header");
      TriangularMap m(dim, order, nodes, panels);
      Eigen::VectorXd all(static_cast<Eigen::Index>(m.parameter_count()));
      for (std::size_t k = 0; k < dim; ++k) {
        std::size_t idx = 0, count = 0;
        if (!(in >> tag >> idx >> count) || tag != "component" || idx != k + 1 ||
            count != m.component(k).parameter_count())
          throw std::runtime_error("surrogate: malformed component record");
        for (std::size_t a = 0; a < count; ++a) {
          std::string num;
          in >> num;
          all[static_cast<Eigen::Index>(m.offset(k) + a)] = io::parse_double(num);
        }
      }
      m.set_coefficients(all);
      s.maps_.push_back(std::move(m));
    }
    return s;
  }

 private:
  void check_point(std::span<const double> x) const {
    if (x.size() != dim_) throw ContractViolation("surrogate: point dimension mismatch");
    detail::check_in_cube(x, "surrogate");
  }

  static bool on_boundary(std::span<const double> x) {
    return std::any_of(x.begin(), x.end(), [](double v) { return v == 0.0 || v == 1.0; });
  }

  std::size_t dim_;
  std::vector<TriangularMap> maps_;
};

}  // namespace mfat
