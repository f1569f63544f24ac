#include <gtest/gtest.h>

#include <cmath>

#include "mfat/parallel.hpp"
#include "support.hpp"

using namespace mfat;
using namespace mfat::testing;

TEST(Poisson, ZeroSourceGivesZeroField) {
  const PoissonSolver s(16);
  const auto u = s.solve([](double, double) { return 0.0; });
  EXPECT_EQ(u.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(u.rows(), 17);
}

TEST(Poisson, CenteredSourceIsReflectionSymmetric) {
  const PoissonSolver s(32);
  const auto u = s.solve(gaussian_source(1.0, 0.15, {0.5, 0.5}));
  EXPECT_LE((u - u.transpose()).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(u(16, 16), 0.0);  // positive source, zero boundary: u is negative inside
}

TEST(Poisson, ReproducesDiscreteQuadraticExactly) {
  // u = x(1-x) y(1-y) has Laplacian -2[y(1-y) + x(1-x)]; the 5-point stencil
  // is exact on quadratics in each variable.
  const PoissonSolver s(20);
  const auto u = s.solve([](double x, double y) { return -2.0 * (y * (1 - y) + x * (1 - x)); });
  double err = 0.0;
  for (int i = 0; i <= 20; ++i)
    for (int j = 0; j <= 20; ++j) {
      const double x = i / 20.0, y = j / 20.0;
      err = std::max(err, std::abs(u(i, j) - x * (1 - x) * y * (1 - y)));
    }
  EXPECT_LE(err, 1e-12);
}

TEST(Poisson, SecondOrderRefinement) {
  const auto f = gaussian_source(DiffusionConfig{}.amplitude(), 0.15, {0.3, 0.6});
  const auto u32 = PoissonSolver(32).solve(f);
  const auto u64 = PoissonSolver(64).solve(f);
  const auto u128 = PoissonSolver(128).solve(f);
  double d1 = 0.0, d2 = 0.0;
  for (int i = 0; i <= 32; ++i)
    for (int j = 0; j <= 32; ++j) {
      d1 = std::max(d1, std::abs(u64(2 * i, 2 * j) - u32(i, j)));
      d2 = std::max(d2, std::abs(u128(4 * i, 4 * j) - u64(2 * i, 2 * j)));
    }
  EXPECT_GT(d1 / d2, 3.5);
  EXPECT_LT(d1 / d2, 4.5);
}

TEST(Poisson, RejectsCoarseGrid) { EXPECT_THROW(PoissonSolver(4), ContractViolation); }

TEST(Observe, NodesConstantsAndLinearFields) {
  const int n = 10;
  Eigen::MatrixXd lin(n + 1, n + 1), c = Eigen::MatrixXd::Constant(n + 1, n + 1, 3.5);
  for (int i = 0; i <= n; ++i)
    for (int j = 0; j <= n; ++j) lin(i, j) = i / double(n) + j / double(n);
  const std::vector<Sensor> pts{{0.3, 0.7}, {0.123, 0.456}, {1.0, 1.0}, {0.0, 0.55}};
  const auto o = observe(lin, pts);
  for (std::size_t k = 0; k < pts.size(); ++k) EXPECT_NEAR(o[k], pts[k][0] + pts[k][1], 1e-14);
  for (double v : observe(c, pts)) EXPECT_EQ(v, 3.5);
  Eigen::MatrixXd r = Eigen::MatrixXd::Random(n + 1, n + 1);
  EXPECT_EQ(observe(r, {{0.2, 0.4}})[0], r(2, 4));
  EXPECT_THROW(observe(r, {{1.2, 0.4}}), ContractViolation);
}

TEST(Observe, DefaultSensorsAreInteriorGrid) {
  const auto s = default_sensors();
  ASSERT_EQ(s.size(), 16u);
  EXPECT_NEAR(s.front()[0], 0.2, 1e-15);
  EXPECT_NEAR(s.back()[1], 0.8, 1e-15);
}

TEST(Likelihood, ZeroResidualAndFormula) {
  const Eigen::VectorXd y = Eigen::Vector3d(1.0, 2.0, 3.0);
  LikelihoodHierarchy h({[&](std::span<const double>) -> Eigen::VectorXd { return y; },
                         [&](std::span<const double>) -> Eigen::VectorXd { return y + Eigen::Vector3d(0.3, 0, 0.4); }},
                        y, 0.04);
  const double th[2] = {0.5, 0.5};
  EXPECT_EQ(h.log_likelihood(0, th), 0.0);
  EXPECT_NEAR(h.log_likelihood(1, th), -0.25 / 0.08, 1e-14);
  EXPECT_EQ(h.counts(), (std::vector<std::size_t>{1, 1}));
  h.evaluate(1, th);
  EXPECT_EQ(h.count(1), 1u);
  // Tempering by beta equals a Gaussian log-density with covariance sigma^2 / beta.
  const double beta = 0.3;
  EXPECT_NEAR(beta * h.evaluate(1, th), -0.25 / (2 * 0.04 / beta), 1e-14);
}

TEST(Likelihood, SolverFailureCarriesFidelityAndTheta) {
  LikelihoodHierarchy h({[](std::span<const double>) -> double { throw std::runtime_error("boom"); }}, 2);
  const double th[2] = {0.25, 0.5};
  try {
    h.log_likelihood(0, th);
    FAIL();
  } catch (const SolverError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("fidelity 1"), std::string::npos);
    EXPECT_NE(msg.find("0.25"), std::string::npos);
  }
  const double out[2] = {1.5, 0.5};
  EXPECT_THROW(h.evaluate(0, out), DomainError);
  EXPECT_THROW(h.evaluate(1, th), ContractViolation);
}

TEST(Likelihood, CountersAreExactUnderConcurrency) {
  auto h = make_analytic_hierarchy("gaussian");
  const auto probe = rqmc_rule(2, 1000, 3);
  parallel_for(1000, 4, [&](std::size_t k) { h->log_likelihood(0, probe.point(k)); });
  EXPECT_EQ(h->count(0), 1000u);
  h->reset_counts();
  EXPECT_EQ(h->count(0), 0u);
}

TEST(Diffusion, DataGeneration) {
  auto cfg = DiffusionConfig::single_source();
  EXPECT_NEAR(cfg.amplitude(), 5.0 / (2 * std::numbers::pi * 0.15 * 0.15), 1e-13);
  auto literal = cfg;
  literal.amplitude_override = 5.0 / (2 * std::numbers::pi * 0.15);
  EXPECT_NEAR(literal.amplitude(), 5.305164769729845, 1e-13);
  cfg.data_resolution = 64;
  const auto a = generate_data(cfg), b = generate_data(cfg);
  EXPECT_TRUE(a == b);
  auto quiet = cfg;
  quiet.data_noise_variance = 0.0;
  const auto clean = generate_data(quiet);
  const DiffusionModel g(64, cfg.amplitude(), cfg.alpha, default_sensors());
  const double t[2] = {0.25, 0.75};
  EXPECT_LE((clean - g(t)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_GT((a - clean).norm(), 0.1);

  const auto multi = DiffusionConfig::multi_source_config();
  EXPECT_EQ(multi.data_noise_variance, 0.0);
  EXPECT_EQ(multi.truth, (std::array<double, 2>{0.15, 0.15}));
  EXPECT_EQ(multi.second_source, (std::array<double, 2>{0.85, 0.85}));
}

TEST(Diffusion, HierarchyConvergesAndIsDeterministic) {
  auto cfg = DiffusionConfig::single_source();
  const Eigen::VectorXd y = Eigen::VectorXd::Zero(16);
  auto h = make_diffusion_hierarchy(cfg, y);
  ASSERT_EQ(h->fidelities(), 3u);
  const auto probe = rqmc_rule(2, 8, 5);
  double d01 = 0.0, d12 = 0.0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const auto g0 = h->forward(0, probe.point(k)), g1 = h->forward(1, probe.point(k)),
               g2 = h->forward(2, probe.point(k));
    d01 += (g0 - g1).norm();
    d12 += (g1 - g2).norm();
    EXPECT_TRUE(g2 == h->forward(2, probe.point(k)));
  }
  EXPECT_LT(d12, d01);
  cfg.resolutions = {16, 16};
  EXPECT_THROW(cfg.validate(), ContractViolation);
}

TEST(Analytic, CatalogMoments) {
  const auto g = grid_oracle_mean(analytic_target("gaussian").log_likelihood, 200);
  EXPECT_NEAR(g[0], 0.4, 1e-6);
  EXPECT_NEAR(g[1], 0.6, 1e-6);
  const auto m = grid_oracle_mean(analytic_target("mixture").log_likelihood, 200);
  EXPECT_NEAR(m[0], 0.5, 1e-12);
  EXPECT_NEAR(m[1], 0.5, 1e-12);
  // Banana moments frozen from an independent 400x400 Gauss-Legendre sum.
  const auto r = reweighted_grid_rule(analytic_target("banana").log_likelihood, 400, 2);
  const Eigen::Vector2d mean = rule_mean(r);
  EXPECT_NEAR(mean[0], 0.5000000000000001, 1e-10);
  EXPECT_NEAR(mean[1], 0.37290048701366824, 1e-10);
  const Eigen::MatrixXd c = r.points().rowwise() - mean.transpose();
  const Eigen::Matrix2d cov = c.transpose() * r.weights().asDiagonal() * c;
  EXPECT_NEAR(cov(0, 0), 0.036450247299010856, 1e-10);
  EXPECT_NEAR(cov(0, 1), 0.0, 1e-10);
  EXPECT_NEAR(cov(1, 1), 0.011131878725656102, 1e-10);
  EXPECT_THROW(analytic_target("nope"), ContractViolation);
}
