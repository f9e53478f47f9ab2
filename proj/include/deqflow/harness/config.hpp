#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "deqflow/deq_layer.hpp"
#include "deqflow/implicit_grad.hpp"
#include "deqflow/solver.hpp"
#include "deqflow/toyflow/params.hpp"

namespace deqflow::harness {

using nlohmann::json;

/// Invalid or unknown configuration. Maps to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

/// Reads the keys of one JSON object, rejecting any it was not asked about.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + (path_.empty() ? k : path_ + "." + k) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

struct GradientConfig {
  std::string mode = "phantom";  // phantom | ift
  int k = 1;
  double damping = 1.0;
  bool adaptive = false;
};

struct CorrectionConfig {
  int freq = 0;
  std::vector<double> gammas;  // empty: 0.8^(r-i+1)
  std::string placement = "uniform";
  std::string loss = "sq_l2";
  std::string loss_on = "map_output";  // map_output: dist(f(z)), iterate: dist(z)
};

struct JacobianRegConfig {
  double coeff = 0.0;
  int probes = 1;
  std::string distribution = "gaussian";
  double fd_step = 1e-4;
};

struct OptimizerConfig {
  double lr = 4e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  double clip_norm = 1.0;
};

struct DataConfig {
  int batch_size = 4;
  double max_disp = 4.0;
  bool translation_only = false;
  double linear_scale = 0.05;
  double smoothness = 0.3;
  int n_streams = 20;
  int frames = 20;
  int eval_samples = 32;
};

struct RunConfig {
  int steps = 2000;
  int eval_every = 200;
  int flush_every = 50;
  bool record_timing = false;  // wall_ms columns are 0 unless set, so reruns stay byte-identical
  int max_consecutive_skips = 10;
  std::string checkpoint;  // model to load for eval / sequence-reuse / correlation-study
};

struct AblationConfig {
  std::vector<int> freq_list{0, 1, 2, 3};
  int budget = 16;
  bool include_ift_arm = true;
  std::vector<double> jr_coeffs{0.1, 1.0};
};

struct StudyConfig {
  int n_samples = 200;
  std::vector<double> max_disp_list{1.0, 4.0, 8.0};
};

struct BenchConfig {
  int dim = 64;
  std::vector<double> radii{0.0, 0.5, 0.9};
  int trials = 20;
  double tol = 1e-8;
  int max_iters = 500;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  toyflow::ModelConfig model;
  SolverConfig solver;
  SolverConfig adjoint_solver = [] {
    SolverConfig c;
    c.max_iters = 40;
    c.rel_tol = 1e-4;
    return c;
  }();
  GradientConfig gradient;
  CorrectionConfig correction;
  JacobianRegConfig jacobian_reg;
  OptimizerConfig optimizer;
  DataConfig data;
  RunConfig run;
  AblationConfig ablation;
  StudyConfig study;
  BenchConfig bench;

  GradientMode gradient_mode() const {
    if (gradient.mode == "ift") return IftMode{adjoint_solver};
    return PhantomMode{gradient.k, gradient.damping, gradient.adaptive};
  }

  CorrectionSchedule schedule() const {
    CorrectionSchedule s = CorrectionSchedule::geometric(correction.freq, parse_placement(correction.placement));
    if (!correction.gammas.empty()) s.gammas = correction.gammas;
    return s;
  }

  /// Throws ConfigError on any inconsistent value.
  void validate() const {
    auto check = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    try {
      model.validate();
      solver.validate();
      adjoint_solver.validate();
      check(gradient.mode == "phantom" || gradient.mode == "ift", "gradient.mode must be 'phantom' or 'ift'");
      deqflow::validate(gradient_mode());
      schedule().validate();
      parse_loss_kind(correction.loss);
      check(correction.loss_on == "map_output" || correction.loss_on == "iterate",
            "correction.loss_on must be 'map_output' or 'iterate'");
      parse_probe_distribution(jacobian_reg.distribution);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    check(jacobian_reg.coeff >= 0 && jacobian_reg.probes >= 1 && jacobian_reg.fd_step > 0,
          "jacobian_reg: coeff >= 0, probes >= 1, fd_step > 0");
    check(optimizer.lr > 0 && optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 &&
              optimizer.beta2 < 1 && optimizer.eps > 0 && optimizer.weight_decay >= 0 && optimizer.clip_norm >= 0,
          "optimizer: invalid hyperparameter");
    check(data.batch_size >= 1 && data.n_streams >= 1 && data.frames >= 1 && data.eval_samples >= 1,
          "data: counts must be positive");
    const double disp_cap = static_cast<double>(std::min(model.image_height, model.image_width)) / 4.0;
    check(data.max_disp >= 0 && data.max_disp < disp_cap, "data.max_disp must lie in [0, min(H,W)/4)");
    check(data.smoothness >= 0 && data.linear_scale >= 0, "data: smoothness and linear_scale must be >= 0");
    check(run.steps >= 0 && run.eval_every >= 1 && run.flush_every >= 1 && run.max_consecutive_skips >= 1,
          "run: steps >= 0, eval_every >= 1, flush_every >= 1, max_consecutive_skips >= 1");
    check(!ablation.freq_list.empty(), "ablation.freq_list must not be empty");
    for (int f : ablation.freq_list) check(f >= 0 && f <= 3, "ablation.freq_list entries must lie in {0,1,2,3}");
    check(ablation.budget >= 1, "ablation.budget must be >= 1");
    for (double c : ablation.jr_coeffs) check(c > 0, "ablation.jr_coeffs must be positive");
    check(study.n_samples >= 2 && !study.max_disp_list.empty(), "study: n_samples >= 2 and a max_disp_list");
    for (double d : study.max_disp_list) check(d >= 0 && d < disp_cap, "study.max_disp_list entries out of range");
    check(bench.dim >= 1 && bench.trials >= 1 && bench.tol > 0 && bench.max_iters >= 1 && !bench.radii.empty(),
          "bench: dim, trials, tol, max_iters must be positive");
    for (double r : bench.radii) check(r >= 0 && r < 1, "bench.radii must lie in [0,1)");
  }
};

inline json solver_to_json(const SolverConfig& c) {
  return {{"method", to_string(c.method)},          {"max_iters", c.max_iters},
          {"rel_tol", c.rel_tol},                   {"abs_tol", c.abs_tol},
          {"anderson_memory", c.anderson_memory},   {"anderson_beta", c.anderson_beta},
          {"anderson_ridge", c.anderson_ridge},     {"picard_damping", c.picard_damping}};
}

inline void solver_from_json(const json& j, const std::string& path, SolverConfig& c) {
  detail::Section s(j, path);
  std::string method = to_string(c.method);
  s.get("method", method);
  try {
    c.method = parse_solver_method(method);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ".method: " + e.what());
  }
  s.get("max_iters", c.max_iters);
  s.get("rel_tol", c.rel_tol);
  s.get("abs_tol", c.abs_tol);
  s.get("anderson_memory", c.anderson_memory);
  s.get("anderson_beta", c.anderson_beta);
  s.get("anderson_ridge", c.anderson_ridge);
  s.get("picard_damping", c.picard_damping);
  s.finish();
}

inline json to_json(const ExperimentConfig& c) {
  const auto& g = c.gradient;
  const auto& cr = c.correction;
  const auto& jr = c.jacobian_reg;
  const auto& o = c.optimizer;
  const auto& d = c.data;
  const auto& r = c.run;
  const auto& a = c.ablation;
  return {
      {"seed", c.seed},
      {"model", json(c.model)},
      {"solver", solver_to_json(c.solver)},
      {"adjoint_solver", solver_to_json(c.adjoint_solver)},
      {"gradient", {{"mode", g.mode}, {"k", g.k}, {"damping", g.damping}, {"adaptive", g.adaptive}}},
      {"correction", {{"freq", cr.freq}, {"gammas", cr.gammas}, {"placement", cr.placement}, {"loss", cr.loss},
        {"loss_on", cr.loss_on}}},
      {"jacobian_reg",
       {{"coeff", jr.coeff}, {"probes", jr.probes}, {"distribution", jr.distribution}, {"fd_step", jr.fd_step}}},
      {"optimizer",
       {{"lr", o.lr}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}, {"weight_decay", o.weight_decay},
        {"clip_norm", o.clip_norm}}},
      {"data",
       {{"batch_size", d.batch_size}, {"max_disp", d.max_disp}, {"translation_only", d.translation_only},
        {"linear_scale", d.linear_scale}, {"smoothness", d.smoothness}, {"n_streams", d.n_streams},
        {"frames", d.frames}, {"eval_samples", d.eval_samples}}},
      {"run",
       {{"steps", r.steps}, {"eval_every", r.eval_every}, {"flush_every", r.flush_every},
        {"record_timing", r.record_timing}, {"max_consecutive_skips", r.max_consecutive_skips},
        {"checkpoint", r.checkpoint}}},
      {"ablation",
       {{"freq_list", a.freq_list}, {"budget", a.budget}, {"include_ift_arm", a.include_ift_arm},
        {"jr_coeffs", a.jr_coeffs}}},
      {"study", {{"n_samples", c.study.n_samples}, {"max_disp_list", c.study.max_disp_list}}},
      {"bench",
       {{"dim", c.bench.dim}, {"radii", c.bench.radii}, {"trials", c.bench.trials}, {"tol", c.bench.tol},
        {"max_iters", c.bench.max_iters}}},
  };
}

/// Strict parse: every key must be known; absent keys keep their defaults.
inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  detail::Section top(j, "");
  top.get("seed", c.seed);
  if (const json* m = top.sub("model")) {
    try {
      toyflow::ModelConfig mc;
      toyflow::from_json(*m, mc);
      c.model = mc;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    } catch (const json::exception& e) {
      throw ConfigError(std::string("model: ") + e.what());
    }
  }
  if (const json* s = top.sub("solver")) solver_from_json(*s, "solver", c.solver);
  if (const json* s = top.sub("adjoint_solver")) solver_from_json(*s, "adjoint_solver", c.adjoint_solver);
  if (const json* s = top.sub("gradient")) {
    detail::Section g(*s, "gradient");
    g.get("mode", c.gradient.mode);
    g.get("k", c.gradient.k);
    g.get("damping", c.gradient.damping);
    g.get("adaptive", c.gradient.adaptive);
    g.finish();
  }
  if (const json* s = top.sub("correction")) {
    detail::Section g(*s, "correction");
    g.get("freq", c.correction.freq);
    g.get("gammas", c.correction.gammas);
    g.get("placement", c.correction.placement);
    g.get("loss", c.correction.loss);
    g.get("loss_on", c.correction.loss_on);
    g.finish();
  }
  if (const json* s = top.sub("jacobian_reg")) {
    detail::Section g(*s, "jacobian_reg");
    g.get("coeff", c.jacobian_reg.coeff);
    g.get("probes", c.jacobian_reg.probes);
    g.get("distribution", c.jacobian_reg.distribution);
    g.get("fd_step", c.jacobian_reg.fd_step);
    g.finish();
  }
  if (const json* s = top.sub("optimizer")) {
    detail::Section g(*s, "optimizer");
    g.get("lr", c.optimizer.lr);
    g.get("beta1", c.optimizer.beta1);
    g.get("beta2", c.optimizer.beta2);
    g.get("eps", c.optimizer.eps);
    g.get("weight_decay", c.optimizer.weight_decay);
    g.get("clip_norm", c.optimizer.clip_norm);
    g.finish();
  }
  if (const json* s = top.sub("data")) {
    detail::Section g(*s, "data");
    g.get("batch_size", c.data.batch_size);
    g.get("max_disp", c.data.max_disp);
    g.get("translation_only", c.data.translation_only);
    g.get("linear_scale", c.data.linear_scale);
    g.get("smoothness", c.data.smoothness);
    g.get("n_streams", c.data.n_streams);
    g.get("frames", c.data.frames);
    g.get("eval_samples", c.data.eval_samples);
    g.finish();
  }
  if (const json* s = top.sub("run")) {
    detail::Section g(*s, "run");
    g.get("steps", c.run.steps);
    g.get("eval_every", c.run.eval_every);
    g.get("flush_every", c.run.flush_every);
    g.get("record_timing", c.run.record_timing);
    g.get("max_consecutive_skips", c.run.max_consecutive_skips);
    g.get("checkpoint", c.run.checkpoint);
    g.finish();
  }
  if (const json* s = top.sub("ablation")) {
    detail::Section g(*s, "ablation");
    g.get("freq_list", c.ablation.freq_list);
    g.get("budget", c.ablation.budget);
    g.get("include_ift_arm", c.ablation.include_ift_arm);
    g.get("jr_coeffs", c.ablation.jr_coeffs);
    g.finish();
  }
  if (const json* s = top.sub("study")) {
    detail::Section g(*s, "study");
    g.get("n_samples", c.study.n_samples);
    g.get("max_disp_list", c.study.max_disp_list);
    g.finish();
  }
  if (const json* s = top.sub("bench")) {
    detail::Section g(*s, "bench");
    g.get("dim", c.bench.dim);
    g.get("radii", c.bench.radii);
    g.get("trials", c.bench.trials);
    g.get("tol", c.bench.tol);
    g.get("max_iters", c.bench.max_iters);
    g.finish();
  }
  top.finish();
  c.validate();
  return c;
}

/// Applies "a.b.c=value" to a config document. The path must already exist;
/// the value is read as JSON when it parses, otherwise as a string.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) throw ConfigError("unknown config key '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = std::move(value);
}

/// Defaults, then the file (if any), then overrides in order.
inline ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  json doc = to_json(ExperimentConfig{});
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file " + file.string());
    json user = json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ConfigError("config file " + file.string() + " is not valid JSON");
    config_from_json(user);  // reject unknown keys against the schema, with their own paths
    doc.merge_patch(user);
  }
  for (const std::string& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

}  // namespace deqflow::harness
