#pragma once

#include <array>
#include <cstddef>

namespace mfat {

/// Shifted Legendre polynomials P~_m(x) = P_m(2x-1) on [0,1] and their first
/// two x-derivatives for m = 0..order, by the three-term recurrence.
/// Storage is fixed-size so tables can live on the stack in hot loops.
struct LegendreTable {
  static constexpr std::size_t kMaxOrder = 31;

  std::array<double, kMaxOrder + 1> value{}, d1{}, d2{};
  std::size_t n = 1;

  LegendreTable() = default;
  explicit LegendreTable(std::size_t order) : n(order + 1) {}

  void evaluate(double x) {
    const double y = 2.0 * x - 1.0;
    // Work in y, rescale to x at the end.
    double p_prev = 1.0;
    value[0] = 1.0;
    d1[0] = 0.0;
    d2[0] = 0.0;
    if (n == 1) return;
    double p = y, dp = 1.0, ddp = 0.0;
    value[1] = p;
    d1[1] = 2.0 * dp;
    d2[1] = 0.0;
    for (std::size_t m = 2; m < n; ++m) {
      const double md = static_cast<double>(m);
      const double p_next = ((2.0 * md - 1.0) * y * p - (md - 1.0) * p_prev) / md;
      const double dp_next = md * p + y * dp;
      const double ddp_next = (md + 1.0) * dp + y * ddp;
      p_prev = p;
      p = p_next;
      dp = dp_next;
      ddp = ddp_next;
      value[m] = p;
      d1[m] = 2.0 * dp;
      d2[m] = 4.0 * ddp;
    }
  }
};

}  // namespace mfat
