#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mfat/quadrature.hpp"

using namespace mfat;

namespace {

// Exact star discrepancy of a 2D point set by enumerating anchored boxes
// whose corners sit on point coordinates (or 1).
double star_discrepancy_2d(const PointMatrix& p) {
  const auto n = p.rows();
  std::vector<double> xs{1.0}, ys{1.0};
  for (Eigen::Index k = 0; k < n; ++k) {
    xs.push_back(p(k, 0));
    ys.push_back(p(k, 1));
  }
  double worst = 0.0;
  for (double x : xs)
    for (double y : ys) {
      int open = 0, closed = 0;
      for (Eigen::Index k = 0; k < n; ++k) {
        if (p(k, 0) < x && p(k, 1) < y) ++open;
        if (p(k, 0) <= x && p(k, 1) <= y) ++closed;
      }
      const double vol = x * y;
      worst = std::max({worst, vol - open / double(n), closed / double(n) - vol});
    }
  return worst;
}

std::uint32_t gray(std::uint32_t i) { return i ^ (i >> 1); }

}  // namespace

TEST(Sobol, UnscrambledMatchesPublishedSequence) {
  // First eight points of the standard 5D sequence (Gray-code ordering).
  const double expected[8][5] = {
      {0.0, 0.0, 0.0, 0.0, 0.0},           {0.5, 0.5, 0.5, 0.5, 0.5},
      {0.75, 0.25, 0.25, 0.25, 0.75},      {0.25, 0.75, 0.75, 0.75, 0.25},
      {0.375, 0.375, 0.625, 0.875, 0.375}, {0.875, 0.875, 0.125, 0.375, 0.875},
      {0.625, 0.125, 0.875, 0.625, 0.625}, {0.125, 0.625, 0.375, 0.125, 0.125}};
  const SobolSequence s(5, false, 0);
  for (std::uint32_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(s.coordinate(gray(i), j), expected[i][j]);
}

TEST(Sobol, DimensionLimits) {
  EXPECT_THROW(SobolSequence(0, true, 1), ContractViolation);
  EXPECT_THROW(SobolSequence(21, true, 1), CapabilityError);
  EXPECT_THROW(rqmc_rule(21, 4, 1), CapabilityError);
  EXPECT_NO_THROW(rqmc_rule(20, 4, 1));
}

TEST(Rqmc, PaddingCounts) {
  const auto p = rqmc_padding(2, 25);
  EXPECT_EQ(p.base, 3u);
  EXPECT_EQ(p.power, 3u);
  EXPECT_EQ(p.candidates, 27u);
  EXPECT_EQ(rqmc_padding(1, 1).base, 2u);
  EXPECT_EQ(rqmc_padding(4, 100).base, 5u);
  EXPECT_EQ(rqmc_padding(4, 100).power, 3u);
}

TEST(Rqmc, TwentyFivePointRule) {
  const auto r = rqmc_rule(2, 25, 7);
  EXPECT_EQ(r.size(), 25u);
  EXPECT_TRUE(r.normalized());
  for (std::size_t k = 0; k < r.size(); ++k) EXPECT_DOUBLE_EQ(r.weight(k), 0.04);
}

TEST(Rqmc, SinglePoint) {
  const auto r = rqmc_rule(1, 1, 3);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r.weight(0), 1.0);
  EXPECT_GE(r.point(0)[0], 0.0);
  EXPECT_LE(r.point(0)[0], 1.0);
}

TEST(Rqmc, MeanAndDiscrepancyBeatPseudoRandom) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto q = rqmc_rule(2, 256, seed);
    const auto m = q.points().colwise().mean();
    EXPECT_NEAR(m(0), 0.5, 0.01);
    EXPECT_NEAR(m(1), 0.5, 0.01);
    const auto mc = pseudo_random_rule(2, 256, seed);
    EXPECT_LT(star_discrepancy_2d(q.points()), star_discrepancy_2d(mc.points()));
  }
}

TEST(Rqmc, Deterministic) {
  const auto a = rqmc_rule(3, 100, 42);
  const auto b = rqmc_rule(3, 100, 42);
  EXPECT_TRUE(a.points() == b.points());
  const auto c = rqmc_rule(3, 100, 43);
  EXPECT_FALSE(a.points() == c.points());
}

TEST(Rqmc, PrefixProperty) {
  const auto big = rqmc_rule(2, 26, 11);  // same padding b^p = 27 as n = 25
  const auto small = rqmc_rule(2, 20, 11);
  for (std::size_t k = 0; k < small.size(); ++k)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(small.point(k)[j], big.point(k)[j]);
}

TEST(Rqmc, ScrambledPointsAvoidBoundary) {
  const auto r = rqmc_rule(4, 1024, 5);
  for (Eigen::Index k = 0; k < r.points().size(); ++k) {
    EXPECT_GT(r.points().data()[k], 0.0);
    EXPECT_LT(r.points().data()[k], 1.0);
  }
}

TEST(Ress, Examples) {
  PointMatrix p(4, 1);
  p << 0.1, 0.2, 0.3, 0.4;
  EXPECT_DOUBLE_EQ(ress(QuadratureRule(p, Eigen::Vector4d::Constant(0.25), true)), 1.0);
  EXPECT_DOUBLE_EQ(ress(QuadratureRule(p, Eigen::Vector4d(0, 1, 0, 0), true)), 0.25);
  PointMatrix p2(2, 1);
  p2 << 0.1, 0.9;
  EXPECT_NEAR(ress(QuadratureRule(p2, Eigen::Vector2d(0.7, 0.3), true)), 0.8620689655172414, 1e-15);
  EXPECT_THROW(ress(QuadratureRule(p2, Eigen::Vector2d(1, 3))), ContractViolation);
}

TEST(Normalize, Examples) {
  PointMatrix p(2, 1);
  p << 0.1, 0.9;
  auto a = normalize(QuadratureRule(p, Eigen::Vector2d(2, 2)));
  EXPECT_EQ(a.weight(0), 0.5);
  EXPECT_EQ(a.weight(1), 0.5);
  EXPECT_TRUE(a.points() == p);
  auto b = normalize(QuadratureRule(p, Eigen::Vector2d(1, 3)));
  EXPECT_EQ(b.weight(0), 0.25);
  EXPECT_EQ(b.weight(1), 0.75);
  auto c = normalize(b);
  EXPECT_EQ(c.weights(), b.weights());
  EXPECT_THROW(normalize(QuadratureRule(p, Eigen::Vector2d(0, 0))), DegenerateRuleError);
}

TEST(Normalize, RessBounds) {
  std::mt19937_64 rng(9);
  std::exponential_distribution<double> e(1.0);
  for (int rep = 0; rep < 20; ++rep) {
    const auto base = pseudo_random_rule(2, 50, rep);
    Eigen::VectorXd w(50);
    for (auto& v : w) v = std::pow(e(rng), 3.0);
    const auto r = normalize(QuadratureRule(base.points(), w));
    EXPECT_NEAR(r.weights().sum(), 1.0, 1e-12);
    const double v = ress(r);
    EXPECT_GE(v, 1.0 / 50 - 1e-15);
    EXPECT_LE(v, 1.0 + 1e-15);
  }
}

TEST(QuadratureRule, ContractChecks) {
  PointMatrix p(2, 1);
  p << 0.1, 1.2;
  EXPECT_THROW(QuadratureRule(p, Eigen::Vector2d(0.5, 0.5)), ContractViolation);
  p << 0.1, 0.2;
  EXPECT_THROW(QuadratureRule(p, Eigen::Vector2d(-0.5, 0.5)), ContractViolation);
  EXPECT_THROW(QuadratureRule(p, Eigen::Vector3d(0.5, 0.5, 0)), ContractViolation);
  EXPECT_THROW(QuadratureRule(p, Eigen::Vector2d(0.5, 0.6), true), ContractViolation);
  EXPECT_THROW(QuadratureRule(PointMatrix(0, 1), Eigen::VectorXd(0)), ContractViolation);
}

TEST(GaussLegendre, IntegratesPolynomialsExactly) {
  for (std::size_t n : {1u, 2u, 5u, 12u, 50u}) {
    const auto gl = gauss_legendre(n);
    for (std::size_t k = 0; k <= 2 * n - 1; ++k) {
      double s = 0.0;
      for (std::size_t q = 0; q < n; ++q) s += gl.weights[q] * std::pow(gl.nodes[q], double(k));
      EXPECT_NEAR(s, 1.0 / (k + 1.0), 1e-14) << "n=" << n << " k=" << k;
    }
    EXPECT_TRUE(std::is_sorted(gl.nodes.begin(), gl.nodes.end()));
  }
}

TEST(Csv, RoundTripIsExact) {
  const auto r = rqmc_rule(3, 37, 8);
  const auto back = rule_from_csv(to_csv(r));
  EXPECT_TRUE(back.points() == r.points());
  EXPECT_TRUE(back.weights() == r.weights());
  EXPECT_TRUE(back.normalized());
}
