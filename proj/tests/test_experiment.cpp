#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "mfat/experiment.hpp"
#include "support.hpp"

using namespace mfat;
using namespace mfat::testing;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("mfat_test_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

Json small_config() {
  return Json::parse(R"({
    "problem": {"kind": "analytic", "target": "gaussian"},
    "anneal": {"thresholds": [1.0], "samples": 64, "steps_per_fidelity": [1], "refine_steps": 1,
               "orders": 3, "fit": {"steps": 200, "step_size": 0.001, "momentum": 0.9}},
    "errors": {"reference_order": 30},
    "output": {"grid": 20, "samples": 64}
  })");
}

std::string slurp(const fs::path& p) { return io::read_file(p.string()); }

std::size_t lines(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST(Config, DefaultsFillInAndRoundTrip) {
  const auto c = parse_config(small_config());
  EXPECT_EQ(c.anneal.samples, std::vector<std::size_t>{64});
  EXPECT_EQ(c.problem.fidelities(), 1u);
  EXPECT_EQ(c.anneal.planned_steps(), 2u);
  const auto again = parse_config(c.to_json());
  EXPECT_EQ(again.to_json().dump(), c.to_json().dump());
  EXPECT_EQ(again.hash(), c.hash());
}

TEST(Config, DiffusionKindsSelectTheirDefaults) {
  const auto s = parse_config(Json::parse(R"({"problem": {"kind": "diffusion-single"},
      "anneal": {"thresholds": [0.5, 0.8, 1.0]}})"));
  EXPECT_EQ(s.problem.diffusion.resolutions, (std::vector<std::size_t>{16, 64, 128}));
  const auto m = parse_config(Json::parse(R"({"problem": {"kind": "diffusion-multi", "amplitude": 2.5},
      "anneal": {"thresholds": [0.5, 0.8, 1.0]}, "seeds": {"data": 9}})"));
  EXPECT_TRUE(m.problem.diffusion.multi_source);
  EXPECT_EQ(m.problem.diffusion.amplitude(), 2.5);
  EXPECT_EQ(m.problem.diffusion.data_seed, 9u);
  EXPECT_NE(s.problem_hash(), m.problem_hash());
}

TEST(Config, HashIgnoresOutputAndWorkers) {
  auto j = small_config();
  const auto base = parse_config(j).hash();
  j["anneal"]["workers"] = 4;
  j["output"]["directory"] = "elsewhere";
  EXPECT_EQ(parse_config(j).hash(), base);
  j["seeds"] = {{"rqmc", 2}};
  EXPECT_NE(parse_config(j).hash(), base);
}

TEST(Config, EveryProblemIsListed) {
  const auto j = Json::parse(R"({
    "problem": {"kind": "diffusion-single", "resolutions": [64, 16], "alpha": 0},
    "anneal": {"thresholds": [0.5, 1.0], "samples": [1], "orders": 0, "fit": {"steps": "x"}, "gamma": -1},
    "seeds": {"rqmc": -1},
    "typo": true
  })");
  try {
    parse_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* needle : {"problem.resolutions", "problem.alpha", "anneal.samples", "anneal.orders",
                               "anneal.fit.steps", "anneal.gamma", "seeds.rqmc", "typo: unknown key"})
      EXPECT_NE(msg.find(needle), std::string::npos) << needle << " missing from:\n" << msg;
  }
  EXPECT_THROW(parse_config(Json::parse(R"({"problem": {"kind": "analytic", "target": "nope"}})")), ConfigError);
  EXPECT_THROW(parse_config(Json::parse("[]")), ConfigError);
}

TEST(Archive, StateRoundTripsExactly) {
  auto c = parse_config(small_config());
  auto h = make_analytic_hierarchy("gaussian");
  Annealer an(*h, c.anneal);
  an.step();
  const Json enc = archive::encode_state(an.state());
  const AnnealState back = archive::decode_state(Json::parse(enc.dump()));
  EXPECT_EQ(archive::encode_state(back).dump(), enc.dump());
  ASSERT_TRUE(back.rule.has_value());
  EXPECT_TRUE(back.rule->points() == an.state().rule->points());
  EXPECT_TRUE(back.rule->weights() == an.state().rule->weights());
}

TEST(Archive, NegativeInfinityLogLikelihoodSurvives) {
  const std::vector<double> v{-std::numeric_limits<double>::infinity(), 0.1, -3e-300};
  const auto back = archive::decode(archive::encode(v));
  EXPECT_EQ(back, v);
}

TEST(Experiment, AnalyticRunWritesArtifactsAndMatchesOracle) {
  TempDir t;
  const auto c = parse_config(small_config());
  ASSERT_EQ(run_experiment(c, t.path), RunStatus::Completed);
  const RunFiles f{t.path};
  for (const auto& p : {f.config(), f.data(), f.reference(), f.cache(), f.diagnostics(), f.timing(), f.state(),
                        f.surrogate(), f.density(), f.samples(), f.quadrature(1), f.quadrature(2)})
    EXPECT_TRUE(fs::exists(p)) << p;
  EXPECT_EQ(lines(f.diagnostics()), 3u);
  EXPECT_EQ(lines(f.density()), 401u);
  EXPECT_EQ(lines(f.samples()), 65u);

  // Final quadrature mean within 3 standard errors of the grid oracle.
  const auto rule = rule_from_csv(slurp(f.quadrature(2)));
  const auto oracle = grid_oracle_mean(analytic_target("gaussian").log_likelihood, 200);
  const auto se = standard_errors(rule);
  const auto mean = rule_mean(rule);
  for (int j = 0; j < 2; ++j) EXPECT_LE(std::abs(mean[j] - oracle[j]), 3 * se[j]);

  // Emitted rule reloads to the archived one bit-for-bit.
  const auto st = archive::decode_state(Json::parse(slurp(f.state()))["payload"]);
  EXPECT_TRUE(rule.points() == st.rule->points());
  EXPECT_TRUE(rule.weights() == st.rule->weights());

  // Cache holds exactly the reported evaluations.
  EXPECT_EQ(EvaluationCache(f.cache().string()).counts(1)[0], st.diagnostics.back().cumulative_total());
}

TEST(Experiment, RerunWithCacheEvaluatesNothing) {
  TempDir t;
  const auto c = parse_config(small_config());
  run_experiment(c, t.path);
  const RunFiles f{t.path};
  const auto diag = slurp(f.diagnostics());
  const auto cache = slurp(f.cache());
  run_experiment(c, t.path);
  EXPECT_EQ(slurp(f.diagnostics()), diag);
  EXPECT_EQ(slurp(f.cache()), cache);
}

TEST(Experiment, ResumeMatchesUninterruptedRun) {
  TempDir a, b;
  const auto c = parse_config(small_config());
  run_experiment(c, a.path);
  RunOptions stop;
  stop.stop_after = 1;
  EXPECT_EQ(run_experiment(c, b.path, stop), RunStatus::Stopped);
  EXPECT_FALSE(fs::exists(RunFiles{b.path}.surrogate()));
  EXPECT_EQ(resume_experiment(b.path), RunStatus::Completed);
  for (const char* name : {"diagnostics.csv", "quadrature_1.csv", "quadrature_2.csv", "surrogate_final.txt",
                           "samples.csv", "density_grid.csv", "evaluations.csv", "state.json"})
    EXPECT_EQ(slurp(a.path / name), slurp(b.path / name)) << name;
  const auto before = slurp(b.path / "state.json");
  EXPECT_EQ(resume_experiment(b.path), RunStatus::Completed);
  EXPECT_EQ(slurp(b.path / "state.json"), before);
}

TEST(Experiment, ResumeRefusesChangedConfigAndCorruptArchive) {
  TempDir t;
  const auto c = parse_config(small_config());
  RunOptions stop;
  stop.stop_after = 1;
  run_experiment(c, t.path, stop);
  const RunFiles f{t.path};
  const auto config = slurp(f.config());
  const auto state = slurp(f.state());

  auto changed = c;
  changed.anneal.fit.momentum = 0.5;
  io::write_file(f.config().string(), changed.to_json().dump(2));
  EXPECT_THROW(resume_experiment(t.path), ConfigError);
  io::write_file(f.config().string(), config);

  auto j = Json::parse(state);
  j["payload"]["beta"] = "0.5";
  io::write_file(f.state().string(), j.dump());
  try {
    resume_experiment(t.path);
    FAIL() << "expected ArchiveError";
  } catch (const ArchiveError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
  io::write_file(f.state().string(), state.substr(0, state.size() / 2));
  EXPECT_THROW(resume_experiment(t.path), ArchiveError);
  io::write_file(f.state().string(), state);
  io::write_file(f.data().string(), "y\n1\n");
  EXPECT_THROW(resume_experiment(t.path), ArchiveError);
}

TEST(Experiment, RefusesCacheOfAnotherProblem) {
  TempDir t;
  run_experiment(parse_config(small_config()), t.path);
  auto j = small_config();
  j["problem"]["target"] = "mixture";
  EXPECT_THROW(run_experiment(parse_config(j), t.path), ConfigError);
}

TEST(Experiment, EmitPlotsNeedsAFinishedRun) {
  TempDir t;
  RunOptions stop;
  stop.stop_after = 1;
  run_experiment(parse_config(small_config()), t.path, stop);
  EXPECT_THROW(emit_plots(t.path), ArchiveError);
  resume_experiment(t.path);
  const auto samples = slurp(t.path / "samples.csv");
  fs::remove(t.path / "samples.csv");
  emit_plots(t.path);
  EXPECT_EQ(slurp(t.path / "samples.csv"), samples);
}
