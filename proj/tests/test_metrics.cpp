#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace mfat;
using namespace mfat::testing;

namespace {

QuadratureRule uniform_grid(int n) {
  PointMatrix p(n * n, 2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) p.row(i * n + j) << (i + 0.5) / n, (j + 0.5) / n;
  return QuadratureRule(p, Eigen::VectorXd::Constant(n * n, 1.0 / (n * n)), true);
}

QuadratureRule point_mass(double x, double y) {
  PointMatrix p(1, 2);
  p << x, y;
  return QuadratureRule(p, Eigen::VectorXd::Ones(1), true);
}

}  // namespace

TEST(Moments, UniformWeightsGiveUnbiasedSampleCovariance) {
  const auto r = pseudo_random_rule(2, 30, 4);
  const auto m = weighted_moments(r);
  const Eigen::MatrixXd c = r.points().rowwise() - r.points().colwise().mean();
  const Eigen::MatrixXd sample = c.transpose() * c / 29.0;
  EXPECT_LE((m.covariance - sample).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Moments, UniformGridCovariance) {
  const auto m = weighted_moments(uniform_grid(100));
  EXPECT_NEAR(m.mean[0], 0.5, 1e-12);
  EXPECT_NEAR(m.covariance(0, 0), 1.0 / 12, 1e-3);
  EXPECT_NEAR(m.covariance(1, 1), 1.0 / 12, 1e-3);
  EXPECT_NEAR(m.covariance(0, 1), 0.0, 1e-12);
}

TEST(Moments, IdenticalPointsAndDegenerateWeights) {
  PointMatrix p(3, 2);
  p << 0.3, 0.4, 0.3, 0.4, 0.3, 0.4;
  const auto m = weighted_moments(QuadratureRule(p, Eigen::Vector3d(0.2, 0.3, 0.5), true));
  EXPECT_EQ(m.covariance.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(weighted_moments(QuadratureRule(p, Eigen::Vector3d(0.0, 1.0, 0.0), true)), DegenerateRuleError);
}

TEST(Moments, IdentityPullbackMatchesRule) {
  const auto r = rqmc_rule(2, 256, 5);
  const auto a = weighted_moments(r), b = weighted_moments(Surrogate(2).pullback_quadrature(r));
  EXPECT_TRUE(a.mean == b.mean);
  EXPECT_TRUE(a.covariance == b.covariance);
}

TEST(Forstner, KnownValuesAndProperties) {
  const Eigen::Matrix2d i2 = Eigen::Matrix2d::Identity();
  EXPECT_NEAR(forstner(i2, 4 * i2), 1.9605162869370942, 1e-14);
  Eigen::Matrix2d c1, c2, a;
  c1 << 2.0, 0.3, 0.3, 1.0;
  c2 << 0.5, -0.1, -0.1, 0.8;
  a << 1.0, 2.0, -0.5, 3.0;
  EXPECT_NEAR(forstner(c1, c1), 0.0, 1e-14);
  EXPECT_NEAR(forstner(c1, c2), forstner(c2, c1), 1e-12);
  EXPECT_NEAR(forstner(a.transpose() * c1 * a, a.transpose() * c2 * a), forstner(c1, c2), 1e-10);
  Eigen::Matrix2d bad;
  bad << 1.0, 2.0, 2.0, 1.0;
  EXPECT_THROW(forstner(bad, i2), ContractViolation);
  EXPECT_THROW(forstner(c1, Eigen::Matrix3d::Identity()), ContractViolation);
}

TEST(Kernels, ClosedForms) {
  const KernelSpec m{KernelFamily::Matern15, 0.05}, g{KernelFamily::SquaredExponential, 0.05};
  EXPECT_EQ(m(0.0), 1.0);
  EXPECT_EQ(g(0.0), 1.0);
  EXPECT_NEAR(g(0.05), std::exp(-0.5), 1e-15);
  EXPECT_NEAR(m(0.05), (1 + std::sqrt(3.0)) * std::exp(-std::sqrt(3.0)), 1e-15);
}

TEST(Mmd, PointMassesAndIdenticalRules) {
  const KernelSpec g{KernelFamily::SquaredExponential, 0.05};
  const double t = 0.07;
  EXPECT_NEAR(mmd2(point_mass(0.2, 0.3), point_mass(0.2 + t, 0.3), g), 2 * (1 - g(t)), 1e-15);
  const auto r = rqmc_rule(2, 128, 3);
  EXPECT_NEAR(mmd2(r, r, g), 0.0, 1e-12);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = pseudo_random_rule(2, 40, s), b = pseudo_random_rule(2, 50, s + 10);
    EXPECT_GE(mmd2(a, b, g), -1e-10);
    EXPECT_GE(mmd2(a, b, KernelSpec{KernelFamily::Matern15, 0.05}), -1e-10);
  }
  EXPECT_NEAR(mmd2(r, pseudo_random_rule(2, 64, 1), g, 3), mmd2(r, pseudo_random_rule(2, 64, 1), g, 1), 0.0);
}

TEST(RelativeErrors, PriorIsOneAndReferenceIsZero) {
  const auto ref = reweighted_grid_rule(analytic_target("gaussian").log_likelihood, 30, 2);
  const auto prior = rqmc_rule(2, 1024, 2);
  const ErrorEvaluator ev(ref, prior);
  const auto p = ev.evaluate(prior, prior);
  for (const auto* e : {&p.rmse, &p.forstner, &p.mmd_matern, &p.mmd_gauss}) {
    EXPECT_TRUE(e->relative);
    EXPECT_NEAR(e->value, 1.0, 1e-12);
  }
  const auto z = ev.evaluate(ref, ref);
  EXPECT_NEAR(z.rmse.value, 0.0, 1e-12);
  // Only the sample-bias factor separates the two covariance estimates.
  EXPECT_NEAR(z.forstner.absolute, std::sqrt(2.0) * -std::log1p(-ref.weights().squaredNorm()), 1e-12);
  EXPECT_NEAR(z.mmd_gauss.value, 0.0, 1e-6);
  EXPECT_NEAR(z.mmd_matern.value, 0.0, 1e-6);
}

TEST(RelativeErrors, VanishingPriorDistanceIsFlagged) {
  // Symmetric mixture: prior mean and posterior mean coincide.
  const auto ref = reweighted_grid_rule(analytic_target("mixture").log_likelihood, 30, 2);
  const ErrorEvaluator ev(ref, tensor_gauss_legendre(30, 2));
  const auto e = ev.evaluate(rqmc_rule(2, 256, 1), rqmc_rule(2, 256, 1));
  EXPECT_FALSE(e.rmse.relative);
  EXPECT_EQ(e.rmse.value, e.rmse.absolute);
  EXPECT_TRUE(e.forstner.relative);
}

TEST(Reference, DiffusionGridOrderStability) {
  auto cfg = DiffusionConfig::single_source();
  auto h = make_diffusion_hierarchy(cfg, generate_data(cfg));
  const std::size_t top = h->fidelities() - 1;
  const auto loglik = [&](std::span<const double> x) { return h->evaluate(top, x); };
  const auto a = quadrature_moments(reweighted_grid_rule(loglik, 50, 2));
  const auto b = quadrature_moments(reweighted_grid_rule(loglik, 60, 2));
  EXPECT_LE((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((a.covariance - b.covariance).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(h->count(top), 0u);
}
