#include <CLI11.hpp>

#include <iostream>

#include "mfat/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

template <class F>
int guarded(F&& body) {
  try {
    body();
    return kOk;
  } catch (const mfat::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const mfat::AnnealError& e) {
    std::cerr << "run failed at step " << e.step() + 1 << ": " << e.what()
              << "\ncompleted steps are persisted; fix the cause and use 'resume'\n";
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-fidelity annealed transport experiments"};
  app.require_subcommand(1);

  std::string config_path, dir, out;
  std::size_t stop_after = 0, workers = 0;

  auto* run = app.add_subcommand("run", "run an experiment from a JSON config");
  run->add_option("config", config_path, "experiment config")->required();
  run->add_option("--out", out, "run directory (default: output.directory from the config)");
  run->add_option("--stop-after", stop_after, "stop after this many completed steps (resume later)");
  run->add_option("--workers", workers, "worker threads (does not change results)");

  auto* resume = app.add_subcommand("resume", "continue an interrupted run");
  resume->add_option("dir", dir, "run directory")->required();
  resume->add_option("--stop-after", stop_after, "stop after this many completed steps");
  resume->add_option("--workers", workers, "worker threads (does not change results)");

  auto* validate = app.add_subcommand("validate", "check a config without running it");
  validate->add_option("config", config_path, "experiment config")->required();

  auto* plots = app.add_subcommand("emit-plots", "rewrite density grid and samples of a finished run");
  plots->add_option("dir", dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  mfat::RunOptions opts;
  opts.log = &std::cerr;
  if (stop_after > 0) opts.stop_after = stop_after;
  if (workers > 0) opts.workers = workers;

  const auto report = [](mfat::RunStatus s, const std::string& where) {
    std::cout << (s == mfat::RunStatus::Completed ? "completed: " : "stopped (resumable): ") << where << "\n";
  };

  if (*run)
    return guarded([&] {
      const auto cfg = mfat::load_config(config_path);
      const std::string where = out.empty() ? cfg.output.directory : out;
      report(mfat::run_experiment(cfg, where, opts), where);
    });
  if (*resume) return guarded([&] { report(mfat::resume_experiment(dir, opts), dir); });
  if (*validate)
    return guarded([&] {
      const auto cfg = mfat::load_config(config_path);
      std::cout << "ok: " << cfg.problem.kind << (cfg.problem.analytic() ? " " + cfg.problem.target : "") << ", "
                << cfg.problem.fidelities() << " fidelit" << (cfg.problem.fidelities() == 1 ? "y" : "ies") << ", "
                << (cfg.anneal.planned() ? std::to_string(cfg.anneal.planned_steps()) + " planned steps"
                                         : "adaptive schedule")
                << ", config hash " << cfg.hash() << "\n";
    });
  if (*plots) return guarded([&] { mfat::emit_plots(dir); });
  return kConfigError;
}
