#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "annealer.hpp"
#include "cache.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "metrics.hpp"
#include "models.hpp"
#include "quadrature.hpp"
#include "transport.hpp"

namespace mfat {

using Json = nlohmann::json;

/// The run directory's archive (state, data or reference) does not match
/// its recorded checksum, or is otherwise unreadable.
class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ProblemConfig {
  std::string kind = "diffusion-single";  // diffusion-single | diffusion-multi | analytic
  std::string target;                     // analytic catalog name
  DiffusionConfig diffusion;

  bool analytic() const { return kind == "analytic"; }
  std::size_t fidelities() const { return analytic() ? 1 : diffusion.resolutions.size(); }
};

struct ErrorConfig {
  bool enabled = true;
  std::size_t reference_order = 50;  // also the prior's grid
  double bandwidth = 0.05;
};

struct OutputConfig {
  std::string directory = "run";
  bool quadrature = true;
  bool density_grid = true;
  std::size_t grid = 200;
  std::size_t samples = 4096;  // 0: no samples.csv
};

struct SeedConfig {
  std::uint64_t data = 1;
  std::uint64_t rqmc = 1;
  std::uint64_t sampling = 1;
};

struct ExperimentConfig {
  ProblemConfig problem;
  AnnealConfig anneal;
  ErrorConfig errors;
  OutputConfig output;
  SeedConfig seeds;

  Json to_json() const;

  /// Hash of everything that determines the numbers a run produces
  /// (output options and worker count excluded).
  std::string hash() const {
    Json j = to_json();
    j.erase("output");
    j["anneal"].erase("workers");
    return io::hex64(io::fnv1a(j.dump()));
  }

  std::string problem_hash() const { return io::hex64(io::fnv1a(to_json()["problem"].dump())); }
};

namespace detail {

// Typed field extraction that records every problem instead of stopping
// at the first one, and flags keys it never consumed.
class FieldReader {
 public:
  FieldReader(const Json& obj, std::string prefix, std::vector<std::string>& problems)
      : obj_(obj), prefix_(std::move(prefix)), problems_(problems) {}

  bool has(const std::string& key) {
    if (!obj_.is_object() || !obj_.contains(key)) return false;
    seen_.insert(key);
    return true;
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    if (!convert(obj_.at(key), out)) problems_.push_back(name(key) + ": expected " + describe(out));
  }

  /// Accepts either a single value or a list.
  template <class T>
  void get_list(const std::string& key, std::vector<T>& out) {
    if (!has(key)) return;
    const Json& v = obj_.at(key);
    T one{};
    if (!v.is_array() && convert(v, one)) {
      out = {one};
      return;
    }
    if (!convert(v, out)) problems_.push_back(name(key) + ": expected " + describe(out));
  }

  const Json* section(const std::string& key) {
    if (!has(key)) return nullptr;
    const Json& v = obj_.at(key);
    if (!v.is_object()) {
      problems_.push_back(name(key) + ": expected an object");
      return nullptr;
    }
    return &v;
  }

  void finish() {
    if (!obj_.is_object()) return;
    for (const auto& [k, v] : obj_.items())
      if (!seen_.count(k)) problems_.push_back(name(k) + ": unknown key");
  }

  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

 private:
  static bool convert(const Json& v, bool& out) {
    if (!v.is_boolean()) return false;
    out = v.get<bool>();
    return true;
  }
  static bool convert(const Json& v, double& out) {
    if (!v.is_number()) return false;
    out = v.get<double>();
    return true;
  }
  template <class T>
    requires std::is_unsigned_v<T>
  static bool convert(const Json& v, T& out) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) return false;
    const auto x = v.get<std::uint64_t>();
    if (x > std::numeric_limits<T>::max()) return false;
    out = static_cast<T>(x);
    return true;
  }
  static bool convert(const Json& v, std::string& out) {
    if (!v.is_string()) return false;
    out = v.get<std::string>();
    return true;
  }
  static bool convert(const Json& v, std::optional<double>& out) {
    if (v.is_null()) {
      out.reset();
      return true;
    }
    double x = 0.0;
    if (!convert(v, x)) return false;
    out = x;
    return true;
  }
  template <class T>
  static bool convert(const Json& v, std::vector<T>& out) {
    if (!v.is_array()) return false;
    std::vector<T> tmp(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!convert(v[i], tmp[i])) return false;
    out = std::move(tmp);
    return true;
  }
  static bool convert(const Json& v, std::array<double, 2>& out) {
    std::vector<double> tmp;
    if (!convert(v, tmp) || tmp.size() != 2) return false;
    out = {tmp[0], tmp[1]};
    return true;
  }

  static std::string describe(bool) { return "a boolean"; }
  static std::string describe(double) { return "a number"; }
  static std::string describe(const std::string&) { return "a string"; }
  static std::string describe(const std::optional<double>&) { return "a number or null"; }
  static std::string describe(const std::array<double, 2>&) { return "a list of 2 numbers"; }
  template <class T>
    requires std::is_unsigned_v<T>
  static std::string describe(T) {
    return "a non-negative integer";
  }
  template <class T>
  static std::string describe(const std::vector<T>&) {
    return "a list of " + std::string(std::is_same_v<T, double> ? "numbers" : "non-negative integers");
  }

  const Json& obj_;
  std::string prefix_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Builds a config from parsed JSON; every problem (type, range, schedule
/// consistency, unknown keys) is collected into one ConfigError.
inline ExperimentConfig parse_config(const Json& root) {
  std::vector<std::string> problems;
  ExperimentConfig c;
  if (!root.is_object()) throw ConfigError("invalid configuration:\n  top level must be an object");
  detail::FieldReader top(root, "", problems);

  if (const Json* p = top.section("problem")) {
    detail::FieldReader r(*p, "problem", problems);
    r.get("kind", c.problem.kind);
    if (c.problem.kind == "diffusion-multi")
      c.problem.diffusion = DiffusionConfig::multi_source_config();
    else if (c.problem.kind == "diffusion-single")
      c.problem.diffusion = DiffusionConfig::single_source();
    else if (c.problem.kind != "analytic")
      problems.push_back("problem.kind: must be diffusion-single, diffusion-multi or analytic");
    if (c.problem.analytic()) {
      r.get("target", c.problem.target);
      bool known = false;
      for (const auto& t : analytic_targets()) known = known || t.name == c.problem.target;
      if (!known) problems.push_back("problem.target: unknown analytic target '" + c.problem.target + "'");
    } else {
      auto& d = c.problem.diffusion;
      r.get("resolutions", d.resolutions);
      r.get("data_resolution", d.data_resolution);
      r.get("alpha", d.alpha);
      r.get("noise_variance", d.noise_variance);
      r.get("data_noise_variance", d.data_noise_variance);
      r.get("truth", d.truth);
      r.get("second_source", d.second_source);
      r.get("amplitude", d.amplitude_override);
      for (const auto& s : d.problems()) problems.push_back("problem." + s);
    }
    r.finish();
  } else {
    problems.push_back("problem: section required");
  }

  auto& a = c.anneal;
  if (const Json* p = top.section("anneal")) {
    detail::FieldReader r(*p, "anneal", problems);
    r.get_list("thresholds", a.thresholds);
    r.get_list("samples", a.samples);
    r.get("steps_per_fidelity", a.steps_per_fidelity);
    r.get("refine_steps", a.refine_steps);
    r.get("max_steps", a.max_steps);
    r.get_list("orders", a.orders);
    r.get_list("lambdas", a.lambdas);
    r.get("order_policy", a.order_policy);
    r.get("candidates", a.candidates);
    r.get("discount", a.discount);
    r.get("ress_floor", a.ress_floor);
    r.get("gamma", a.gamma);
    r.get("quad_nodes", a.quad_nodes);
    r.get("panels", a.panels);
    r.get("error_points", a.error_points);
    r.get("workers", a.workers);
    if (const Json* f = r.section("fit")) {
      detail::FieldReader fr(*f, "anneal.fit", problems);
      fr.get("steps", a.fit.steps);
      fr.get("step_size", a.fit.step_size);
      fr.get("momentum", a.fit.momentum);
      fr.finish();
    }
    r.finish();
  }

  if (const Json* p = top.section("errors")) {
    detail::FieldReader r(*p, "errors", problems);
    r.get("enabled", c.errors.enabled);
    r.get("reference_order", c.errors.reference_order);
    r.get("bandwidth", c.errors.bandwidth);
    r.finish();
  }
  if (c.errors.reference_order < 2) problems.push_back("errors.reference_order: must be >= 2");
  if (!(c.errors.bandwidth > 0.0)) problems.push_back("errors.bandwidth: must be > 0");

  if (const Json* p = top.section("output")) {
    detail::FieldReader r(*p, "output", problems);
    r.get("directory", c.output.directory);
    r.get("quadrature", c.output.quadrature);
    r.get("density_grid", c.output.density_grid);
    r.get("grid", c.output.grid);
    r.get("samples", c.output.samples);
    r.finish();
  }
  if (c.output.directory.empty()) problems.push_back("output.directory: must not be empty");
  if (c.output.grid < 2) problems.push_back("output.grid: must be >= 2");

  if (const Json* p = top.section("seeds")) {
    detail::FieldReader r(*p, "seeds", problems);
    r.get("data", c.seeds.data);
    r.get("rqmc", c.seeds.rqmc);
    r.get("sampling", c.seeds.sampling);
    r.finish();
  }
  top.finish();

  c.problem.diffusion.data_seed = c.seeds.data;
  a.seed = c.seeds.rqmc;
  for (const auto& s : a.problems(c.problem.fidelities())) problems.push_back("anneal." + s);

  if (!problems.empty()) {
    std::string msg = "invalid configuration (" + std::to_string(problems.size()) + " problem" +
                      (problems.size() == 1 ? "" : "s") + "):";
    for (const auto& s : problems) msg += "\n  " + s;
    throw ConfigError(msg);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

inline Json ExperimentConfig::to_json() const {
  Json p{{"kind", problem.kind}};
  if (problem.analytic()) {
    p["target"] = problem.target;
  } else {
    const auto& d = problem.diffusion;
    p["resolutions"] = d.resolutions;
    p["data_resolution"] = d.data_resolution;
    p["alpha"] = d.alpha;
    p["noise_variance"] = d.noise_variance;
    p["data_noise_variance"] = d.data_noise_variance;
    p["truth"] = d.truth;
    p["second_source"] = d.second_source;
    p["amplitude"] = d.amplitude_override ? Json(*d.amplitude_override) : Json(nullptr);
  }
  const auto& a = anneal;
  Json an{{"thresholds", a.thresholds},
          {"samples", a.samples},
          {"steps_per_fidelity", a.steps_per_fidelity},
          {"refine_steps", a.refine_steps},
          {"max_steps", a.max_steps},
          {"orders", a.orders},
          {"lambdas", a.lambdas},
          {"order_policy", a.order_policy},
          {"candidates", a.candidates},
          {"discount", a.discount},
          {"ress_floor", a.ress_floor},
          {"gamma", a.gamma},
          {"quad_nodes", a.quad_nodes},
          {"panels", a.panels},
          {"error_points", a.error_points},
          {"workers", a.workers},
          {"fit", {{"steps", a.fit.steps}, {"step_size", a.fit.step_size}, {"momentum", a.fit.momentum}}}};
  return Json{{"problem", p},
              {"anneal", an},
              {"errors",
               {{"enabled", errors.enabled},
                {"reference_order", errors.reference_order},
                {"bandwidth", errors.bandwidth}}},
              {"output",
               {{"directory", output.directory},
                {"quadrature", output.quadrature},
                {"density_grid", output.density_grid},
                {"grid", output.grid},
                {"samples", output.samples}}},
              {"seeds", {{"data", seeds.data}, {"rqmc", seeds.rqmc}, {"sampling", seeds.sampling}}}};
}

// ---------------------------------------------------------------------------
// Archive encoding. Doubles are stored as shortest round-trip strings so
// -inf log-likelihoods survive and reloads are bit-exact.

namespace archive {

inline std::string encode(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ' ';
    s += io::format_double(v[i]);
  }
  return s;
}

inline std::vector<double> decode(const std::string& s) {
  std::vector<double> v;
  if (s.empty()) return v;
  for (auto f : io::split(s, ' ')) v.push_back(io::parse_double(f));
  return v;
}

inline Eigen::VectorXd decode_vector(const Json& j) {
  const auto v = decode(j.get<std::string>());
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Json encode_points(const PointMatrix& p) {
  return {{"rows", p.rows()}, {"cols", p.cols()}, {"values", encode({p.data(), static_cast<std::size_t>(p.size())})}};
}

inline PointMatrix decode_points(const Json& j) {
  const auto v = decode(j.at("values").get<std::string>());
  const auto r = j.at("rows").get<Eigen::Index>(), c = j.at("cols").get<Eigen::Index>();
  if (static_cast<Eigen::Index>(v.size()) != r * c) throw ArchiveError("point block has wrong size");
  return Eigen::Map<const PointMatrix>(v.data(), r, c);
}

inline std::string d(double x) { return io::format_double(x); }
inline double d(const Json& j) { return io::parse_double(j.get<std::string>()); }

inline Json encode_error(const RelativeError& e) {
  return {{"value", d(e.value)}, {"absolute", d(e.absolute)}, {"relative", e.relative}};
}

inline RelativeError decode_error(const Json& j) {
  return {d(j.at("value")), d(j.at("absolute")), j.at("relative").get<bool>()};
}

inline Json encode_diagnostics(const StepDiagnostics& s) {
  Json j{{"step", s.step},
         {"fidelity", s.fidelity},
         {"beta", d(s.beta)},
         {"parameters", s.parameters},
         {"order", s.order},
         {"ress", d(s.ress)},
         {"rule_size", s.rule_size},
         {"new_evals", s.new_evals},
         {"cumulative", s.cumulative},
         {"search_evals", s.search_evals},
         {"forced", s.forced},
         {"stalled", s.stalled},
         {"below_floor", s.below_floor},
         {"fit_loss", d(s.fit_loss)}};
  if (s.errors) {
    j["errors"] = {{"rmse", encode_error(s.errors->rmse)},
                   {"forstner", encode_error(s.errors->forstner)},
                   {"mmd_matern", encode_error(s.errors->mmd_matern)},
                   {"mmd_gauss", encode_error(s.errors->mmd_gauss)}};
  }
  return j;
}

inline StepDiagnostics decode_diagnostics(const Json& j) {
  StepDiagnostics s;
  s.step = j.at("step").get<std::size_t>();
  s.fidelity = j.at("fidelity").get<std::size_t>();
  s.beta = d(j.at("beta"));
  s.parameters = j.at("parameters").get<std::size_t>();
  s.order = j.at("order").get<unsigned>();
  s.ress = d(j.at("ress"));
  s.rule_size = j.at("rule_size").get<std::size_t>();
  s.new_evals = j.at("new_evals").get<std::size_t>();
  s.cumulative = j.at("cumulative").get<std::vector<std::size_t>>();
  s.search_evals = j.at("search_evals").get<std::size_t>();
  s.forced = j.at("forced").get<bool>();
  s.stalled = j.at("stalled").get<bool>();
  s.below_floor = j.at("below_floor").get<bool>();
  s.fit_loss = d(j.at("fit_loss"));
  if (j.contains("errors")) {
    const auto& e = j.at("errors");
    s.errors = ErrorReport{decode_error(e.at("rmse")), decode_error(e.at("forstner")),
                           decode_error(e.at("mmd_matern")), decode_error(e.at("mmd_gauss"))};
  }
  return s;
}

inline Json encode_state(const AnnealState& s) {
  Json memos = Json::array();
  for (const auto& m : s.memos) {
    memos.push_back({{"surrogate", m.surrogate.serialize()},
                     {"points", encode_points(m.points)},
                     {"base_weights", encode({m.base_weights.data(), static_cast<std::size_t>(m.base_weights.size())})},
                     {"log_likelihood",
                      encode({m.log_likelihood.data(), static_cast<std::size_t>(m.log_likelihood.size())})},
                     {"fidelity", m.fidelity}});
  }
  Json diags = Json::array();
  for (const auto& x : s.diagnostics) diags.push_back(encode_diagnostics(x));
  Json rule = nullptr;
  if (s.rule)
    rule = {{"points", encode_points(s.rule->points())},
            {"weights", encode({s.rule->weights().data(), s.rule->size()})},
            {"normalized", s.rule->normalized()}};
  return {{"next_step", s.next_step},
          {"level", s.level},
          {"in_level", s.in_level},
          {"beta", d(s.beta)},
          {"ress", d(s.ress)},
          {"previous", s.previous.serialize()},
          {"memos", memos},
          {"rule", rule},
          {"diagnostics", diags},
          {"cumulative", s.cumulative},
          {"finished", s.finished}};
}

inline AnnealState decode_state(const Json& j) {
  AnnealState s;
  s.next_step = j.at("next_step").get<std::size_t>();
  s.level = j.at("level").get<std::size_t>();
  s.in_level = j.at("in_level").get<std::size_t>();
  s.beta = d(j.at("beta"));
  s.ress = d(j.at("ress"));
  s.previous = Surrogate::deserialize(j.at("previous").get<std::string>());
  for (const auto& m : j.at("memos")) {
    s.memos.push_back(StageMemo{Surrogate::deserialize(m.at("surrogate").get<std::string>()),
                                decode_points(m.at("points")), decode_vector(m.at("base_weights")),
                                decode_vector(m.at("log_likelihood")), m.at("fidelity").get<std::size_t>()});
    s.memos.back().validate();
  }
  if (!j.at("rule").is_null()) {
    const auto& r = j.at("rule");
    s.rule = QuadratureRule(decode_points(r.at("points")), decode_vector(r.at("weights")),
                            r.at("normalized").get<bool>());
  }
  for (const auto& x : j.at("diagnostics")) s.diagnostics.push_back(decode_diagnostics(x));
  s.cumulative = j.at("cumulative").get<std::vector<std::size_t>>();
  s.finished = j.at("finished").get<bool>();
  return s;
}

}  // namespace archive

// ---------------------------------------------------------------------------
// Run directory.

namespace fs = std::filesystem;

struct RunFiles {
  fs::path dir;
  fs::path config() const { return dir / "config.json"; }
  fs::path data() const { return dir / "data.csv"; }
  fs::path reference() const { return dir / "reference.csv"; }
  fs::path cache() const { return dir / "evaluations.csv"; }
  fs::path diagnostics() const { return dir / "diagnostics.csv"; }
  fs::path timing() const { return dir / "timing.csv"; }
  fs::path state() const { return dir / "state.json"; }
  fs::path surrogate() const { return dir / "surrogate_final.txt"; }
  fs::path density() const { return dir / "density_grid.csv"; }
  fs::path samples() const { return dir / "samples.csv"; }
  fs::path quadrature(std::size_t j) const { return dir / ("quadrature_" + std::to_string(j) + ".csv"); }
};

/// Write-then-rename so readers never see a half-written file.
inline void write_atomic(const fs::path& path, std::string_view contents) {
  const fs::path tmp = path.string() + ".tmp";
  io::write_file(tmp.string(), contents);
  fs::rename(tmp, path);
}

inline std::string diagnostics_csv(const std::vector<StepDiagnostics>& ds) {
  std::string out =
      "j,fidelity,beta,p,ress,rmse,forstner,mmd_m15,mmd_g,new_evals,cumulative_evals,"
      "cumulative_by_fidelity,forced,stalled,below_floor,absolute_metrics\n";
  for (const auto& s : ds) {
    std::string row = std::to_string(s.step + 1) + "," + std::to_string(s.fidelity + 1) + "," +
                      io::format_double(s.beta) + "," + std::to_string(s.parameters) + "," +
                      io::format_double(s.ress) + ",";
    std::string absolute;
    if (s.errors) {
      const std::pair<const char*, const RelativeError*> es[] = {{"rmse", &s.errors->rmse},
                                                                 {"forstner", &s.errors->forstner},
                                                                 {"mmd_m15", &s.errors->mmd_matern},
                                                                 {"mmd_g", &s.errors->mmd_gauss}};
      for (const auto& [name, e] : es) {
        row += io::format_double(e->value) + ",";
        if (!e->relative) absolute += (absolute.empty() ? "" : ";") + std::string(name);
      }
    } else {
      row += ",,,,";
    }
    std::string by;
    for (std::size_t l = 0; l < s.cumulative.size(); ++l) by += (l ? ";" : "") + std::to_string(s.cumulative[l]);
    row += std::to_string(s.new_evals) + "," + std::to_string(s.cumulative_total()) + "," + by + "," +
           (s.forced ? "1" : "0") + "," + (s.stalled ? "1" : "0") + "," + (s.below_floor ? "1" : "0") + "," +
           absolute + "\n";
    out += row;
  }
  return out;
}

inline std::string data_csv(const Eigen::VectorXd& y) {
  std::string out = "y\n";
  for (double v : y) out += io::format_double(v) + "\n";
  return out;
}

inline Eigen::VectorXd data_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "y") throw ArchiveError("data.csv: missing header");
  std::vector<double> v;
  while (std::getline(in, line))
    if (!line.empty()) v.push_back(io::parse_double(line));
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::unique_ptr<LikelihoodHierarchy> make_hierarchy(const ProblemConfig& p, const Eigen::VectorXd& data) {
  if (p.analytic()) return make_analytic_hierarchy(p.target);
  return make_diffusion_hierarchy(p.diffusion, data);
}

struct RunOptions {
  std::optional<std::size_t> stop_after;  // stop once this many steps are complete
  std::optional<std::size_t> workers;
  std::ostream* log = nullptr;
};

enum class RunStatus { Completed, Stopped };

namespace detail {

struct StateFile {
  std::string config_hash, data_checksum, reference_checksum;
  AnnealState state;
};

inline std::string checksum(std::string_view s) { return io::hex64(io::fnv1a(s)); }

inline void write_state(const RunFiles& f, const std::string& config_hash, const std::string& data_sum,
                        const std::string& ref_sum, const AnnealState& s) {
  const Json payload = archive::encode_state(s);
  const std::string body = payload.dump();
  const Json j{{"format", 1},
               {"config_hash", config_hash},
               {"data_checksum", data_sum},
               {"reference_checksum", ref_sum},
               {"checksum", checksum(body)},
               {"payload", payload}};
  write_atomic(f.state(), j.dump());
}

inline StateFile read_state(const RunFiles& f) {
  std::string text;
  try {
    text = io::read_file(f.state().string());
  } catch (const std::exception&) {
    throw ArchiveError("no resumable state in '" + f.dir.string() + "' (state.json missing)");
  }
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ArchiveError("state.json is corrupted (not valid JSON: " + std::string(e.what()) + ")");
  }
  try {
    const std::string stored = j.at("checksum").get<std::string>();
    const std::string actual = checksum(j.at("payload").dump());
    if (stored != actual)
      throw ArchiveError("state.json checksum mismatch: recorded " + stored + ", computed " + actual);
    StateFile s{j.at("config_hash").get<std::string>(), j.at("data_checksum").get<std::string>(),
                j.at("reference_checksum").get<std::string>(), archive::decode_state(j.at("payload"))};
    return s;
  } catch (const ArchiveError&) {
    throw;
  } catch (const std::exception& e) {
    throw ArchiveError("state.json is corrupted: " + std::string(e.what()));
  }
}

inline void say(const RunOptions& o, const std::string& s) {
  if (o.log) *o.log << s << std::endl;
}

inline std::string fmt(double x, int prec = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*g", prec, x);
  return buf;
}

inline void write_step_outputs(const RunFiles& f, const ExperimentConfig& c, const AnnealState& s) {
  if (c.output.quadrature && s.rule) write_atomic(f.quadrature(s.next_step), to_csv(*s.rule));
  write_atomic(f.diagnostics(), diagnostics_csv(s.diagnostics));
}

inline RunStatus drive(const RunFiles& f, const ExperimentConfig& c, const Eigen::VectorXd& data,
                       const QuadratureRule* reference, const std::string& data_sum, const std::string& ref_sum,
                       std::optional<AnnealState> restored, const RunOptions& o);

}  // namespace detail

inline void emit_plots(const fs::path& dir);

/// Starts a fresh run in `dir` (default: the config's output directory).
/// An existing evaluation log is reused when the problem is unchanged.
inline RunStatus run_experiment(const ExperimentConfig& cfg, const fs::path& dir, const RunOptions& o = {}) {
  ExperimentConfig c = cfg;
  if (o.workers) c.anneal.workers = *o.workers;
  const RunFiles f{dir};
  fs::create_directories(dir);
  if (fs::exists(f.config())) {
    std::optional<ExperimentConfig> old;
    try {
      old = load_config(f.config().string());
    } catch (const ConfigError&) {
    }
    if (!old || old->problem_hash() != c.problem_hash()) {
      if (fs::exists(f.cache()))
        throw ConfigError("output directory '" + dir.string() +
                          "' holds evaluations of a different problem; choose another directory");
    }
  }
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("quadrature_", 0) == 0 || name == "diagnostics.csv" || name == "timing.csv" ||
        name == "state.json" || name == "surrogate_final.txt" || name == "density_grid.csv" ||
        name == "samples.csv" || name == "reference.csv")
      fs::remove(e.path());
  }
  write_atomic(f.config(), c.to_json().dump(2) + "\n");

  Eigen::VectorXd data;
  if (!c.problem.analytic()) data = generate_data(c.problem.diffusion);
  const std::string data_text = data_csv(data);
  write_atomic(f.data(), data_text);

  std::optional<QuadratureRule> reference;
  std::string ref_text;
  if (c.errors.enabled) {
    const auto t0 = std::chrono::steady_clock::now();
    auto h = make_hierarchy(c.problem, data);
    const std::size_t top = h->fidelities() - 1;
    reference = reweighted_grid_rule([&](std::span<const double> x) { return h->evaluate(top, x); },
                                     c.errors.reference_order, h->dimension(), c.anneal.workers);
    ref_text = to_csv(*reference);
    write_atomic(f.reference(), ref_text);
    detail::say(o, "reference posterior: order " + std::to_string(c.errors.reference_order) + " grid, " +
                       detail::fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) +
                       " s");
  }
  io::write_file(f.timing().string(), "j,seconds,elapsed\n");
  return detail::drive(f, c, data, reference ? &*reference : nullptr, detail::checksum(data_text),
                       detail::checksum(ref_text), std::nullopt, o);
}

inline RunStatus run_experiment(const ExperimentConfig& cfg, const RunOptions& o = {}) {
  return run_experiment(cfg, fs::path(cfg.output.directory), o);
}

/// Continues a run from its last completed step. A finished run is left
/// untouched. Refuses (ConfigError) when config.json no longer matches the
/// archived hash, and (ArchiveError) when any archive checksum fails.
inline RunStatus resume_experiment(const fs::path& dir, const RunOptions& o = {}) {
  const RunFiles f{dir};
  if (!fs::exists(f.config())) throw ArchiveError("'" + dir.string() + "' is not a run directory (no config.json)");
  ExperimentConfig c = load_config(f.config().string());
  if (o.workers) c.anneal.workers = *o.workers;
  auto st = detail::read_state(f);
  if (st.config_hash != c.hash())
    throw ConfigError("config.json in '" + dir.string() + "' does not match the archived run (hash " +
                      c.hash() + ", archived " + st.config_hash + "); refusing to resume");
  if (st.state.finished) {
    detail::say(o, "run already complete; nothing to do");
    return RunStatus::Completed;
  }
  std::string data_text;
  try {
    data_text = io::read_file(f.data().string());
  } catch (const std::exception& e) {
    throw ArchiveError(e.what());
  }
  if (detail::checksum(data_text) != st.data_checksum)
    throw ArchiveError("data.csv checksum mismatch: recorded " + st.data_checksum + ", computed " +
                       detail::checksum(data_text));
  const Eigen::VectorXd data = data_from_csv(data_text);
  std::optional<QuadratureRule> reference;
  std::string ref_text;
  if (c.errors.enabled) {
    try {
      ref_text = io::read_file(f.reference().string());
    } catch (const std::exception& e) {
      throw ArchiveError(e.what());
    }
    if (detail::checksum(ref_text) != st.reference_checksum)
      throw ArchiveError("reference.csv checksum mismatch: recorded " + st.reference_checksum + ", computed " +
                         detail::checksum(ref_text));
    reference = rule_from_csv(ref_text);
  }
  detail::say(o, "resuming at step " + std::to_string(st.state.next_step + 1));
  return detail::drive(f, c, data, reference ? &*reference : nullptr, st.data_checksum, st.reference_checksum,
                       std::move(st.state), o);
}

namespace detail {

inline RunStatus drive(const RunFiles& f, const ExperimentConfig& c, const Eigen::VectorXd& data,
                       const QuadratureRule* reference, const std::string& data_sum, const std::string& ref_sum,
                       std::optional<AnnealState> restored, const RunOptions& o) {
  auto h = make_hierarchy(c.problem, data);
  std::optional<ErrorEvaluator> ev;
  if (reference)
    ev.emplace(*reference, tensor_gauss_legendre(c.errors.reference_order, h->dimension()), c.errors.bandwidth,
               c.anneal.workers);
  EvaluationCache cache(f.cache().string());
  Annealer an(*h, c.anneal, &cache, ev ? &*ev : nullptr);
  if (restored) an.restore(std::move(*restored));
  const std::string hash = c.hash();
  if (!restored) write_state(f, hash, data_sum, ref_sum, an.state());

  const auto start = std::chrono::steady_clock::now();
  while (!an.done()) {
    if (o.stop_after && an.state().next_step >= *o.stop_after) {
      say(o, "stopped after " + std::to_string(an.state().next_step) + " steps");
      return RunStatus::Stopped;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto& d = an.step();
    const auto t1 = std::chrono::steady_clock::now();
    write_step_outputs(f, c, an.state());
    write_state(f, hash, data_sum, ref_sum, an.state());
    {
      std::ofstream t(f.timing(), std::ios::app);
      t << d.step + 1 << "," << io::format_double(std::chrono::duration<double>(t1 - t0).count()) << ","
        << io::format_double(std::chrono::duration<double>(t1 - start).count()) << "\n";
    }
    std::string line = "step " + std::to_string(d.step + 1) + "  fidelity " + std::to_string(d.fidelity + 1) +
                       "  beta " + fmt(d.beta) + "  p " + std::to_string(d.parameters) + "  rESS " + fmt(d.ress);
    if (d.errors)
      line += "  rmse " + fmt(d.errors->rmse.value) + "  forstner " + fmt(d.errors->forstner.value) + "  mmd_g " +
              fmt(d.errors->mmd_gauss.value);
    line += "  (" + fmt(std::chrono::duration<double>(t1 - t0).count(), 2) + " s)";
    say(o, line);
  }
  write_atomic(f.surrogate(), an.surrogate().serialize());
  emit_plots(f.dir);
  return RunStatus::Completed;
}

}  // namespace detail

/// Rewrites density_grid.csv and samples.csv of a finished run from its
/// final surrogate and config.
inline void emit_plots(const fs::path& dir) {
  const RunFiles f{dir};
  const ExperimentConfig c = load_config(f.config().string());
  std::string text;
  try {
    text = io::read_file(f.surrogate().string());
  } catch (const std::exception&) {
    throw ArchiveError("'" + dir.string() + "' has no final surrogate; the run is not complete");
  }
  const Surrogate s = Surrogate::deserialize(text);
  if (c.output.density_grid && s.dimension() == 2) {
    const std::size_t g = c.output.grid;
    std::string out = "theta_1,theta_2,density\n";
    double x[2];
    for (std::size_t i = 0; i < g; ++i)
      for (std::size_t k = 0; k < g; ++k) {
        x[0] = (static_cast<double>(i) + 0.5) / static_cast<double>(g);
        x[1] = (static_cast<double>(k) + 0.5) / static_cast<double>(g);
        out += io::format_double(x[0]) + "," + io::format_double(x[1]) + "," +
               io::format_double(std::exp(s.log_density(x))) + "\n";
      }
    write_atomic(f.density(), out);
  }
  if (c.output.samples > 0) {
    const auto r = s.pullback_quadrature(rqmc_rule(s.dimension(), c.output.samples, c.seeds.sampling));
    std::string out;
    for (std::size_t j = 0; j < s.dimension(); ++j) out += (j ? "," : "") + ("theta_" + std::to_string(j + 1));
    out += "\n";
    for (std::size_t k = 0; k < r.size(); ++k) {
      const auto p = r.point(k);
      for (std::size_t j = 0; j < p.size(); ++j) out += (j ? "," : "") + io::format_double(p[j]);
      out += "\n";
    }
    write_atomic(f.samples(), out);
  }
}

}  // namespace mfat
