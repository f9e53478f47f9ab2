#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "deqflow/harness/config.hpp"
#include "deqflow/harness/csv.hpp"
#include "deqflow/harness/stats.hpp"
#include "deqflow/harness/train.hpp"
#include "deqflow/solver.hpp"
#include "deqflow/toyflow/metrics.hpp"

namespace deqflow::harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Correction ablation

struct AblationArm {
  std::string name;
  ExperimentConfig config;
};

/// One arm per correction frequency, then the optional ift arm and one
/// Jacobian-regularization arm per coefficient. Every arm runs under the
/// shared forward budget and sees the same data seed.
inline std::vector<AblationArm> ablation_arms(const ExperimentConfig& c) {
  ExperimentConfig base = c;
  base.solver.max_iters = c.ablation.budget;
  base.jacobian_reg.coeff = 0.0;
  base.correction.gammas.clear();
  std::vector<AblationArm> arms;
  for (int f : c.ablation.freq_list) {
    ExperimentConfig a = base;
    a.correction.freq = f;
    arms.push_back({"freq" + std::to_string(f), a});
  }
  if (c.ablation.include_ift_arm) {
    ExperimentConfig a = base;
    a.correction.freq = 0;
    a.gradient.mode = "ift";
    arms.push_back({"ift", a});
  }
  for (double coeff : c.ablation.jr_coeffs) {
    ExperimentConfig a = base;
    a.correction.freq = 0;
    a.jacobian_reg.coeff = coeff;
    arms.push_back({"jr" + format_number(coeff), a});
  }
  return arms;
}

struct ArmSummary {
  std::string name;
  double final_abs_residual = 0.0;  // mean over the last 10% of steps
  double final_rel_residual = 0.0;
  double final_aepe = 0.0;
  int skipped_steps = 0;
};

/// Means over the last ceil(n/10) step records.
inline std::pair<double, double> final_phase_residuals(const std::vector<StepRecord>& steps) {
  if (steps.empty()) return {0.0, 0.0};
  const std::size_t tail = std::max<std::size_t>(1, (steps.size() + 9) / 10);
  double a = 0.0, r = 0.0;
  for (std::size_t i = steps.size() - tail; i < steps.size(); ++i) {
    a += steps[i].abs_residual;
    r += steps[i].rel_residual;
  }
  return {a / static_cast<double>(tail), r / static_cast<double>(tail)};
}

/// Trains every arm into out/arms/<name>/ and writes ablation_steps.csv,
/// ablation_eval.csv and ablation_summary.csv. Arms run in order.
inline std::vector<ArmSummary> ablate_correction(const ExperimentConfig& c, const fs::path& out,
                                                 std::ostream* log = nullptr) {
  fs::create_directories(out);
  CsvWriter steps_csv(out / "ablation_steps.csv",
                      {"arm", "step", "loss_total", "fwd_iters", "abs_residual", "rel_residual"}, 1000);
  CsvWriter eval_csv(out / "ablation_eval.csv", {"arm", "step", "aepe", "f1_all", "mean_residual"});
  CsvWriter summary_csv(out / "ablation_summary.csv",
                        {"arm", "freq", "gradient", "jr_coeff", "budget", "final_abs_residual",
                         "final_rel_residual", "final_aepe", "skipped_steps"});
  std::vector<ArmSummary> summaries;
  for (const AblationArm& arm : ablation_arms(c)) {
    if (log) *log << "arm " << arm.name << '\n';
    const TrainResult r = train(arm.config, out / "arms" / arm.name, log);
    for (const StepRecord& s : r.steps)
      steps_csv.row({arm.name, s.step, s.loss_total, s.fwd_iters, s.abs_residual, s.rel_residual});
    for (const EvalRecord& e : r.evals) eval_csv.row({arm.name, e.step, e.aepe, e.f1_all, e.mean_residual});
    ArmSummary s{arm.name};
    std::tie(s.final_abs_residual, s.final_rel_residual) = final_phase_residuals(r.steps);
    s.final_aepe = r.evals.empty() ? std::nan("") : r.evals.back().aepe;
    s.skipped_steps = r.skipped_steps;
    summary_csv.row({s.name, arm.config.correction.freq, arm.config.gradient.mode, arm.config.jacobian_reg.coeff,
                     arm.config.solver.max_iters, s.final_abs_residual, s.final_rel_residual, s.final_aepe,
                     s.skipped_steps});
    summaries.push_back(s);
  }
  return summaries;
}

// ---------------------------------------------------------------------------
// Fixed-point reuse on sequences

/// Iterations until the relative residual first reached `tol`; max_iters when it never did.
inline int iterations_to_tol(const SolverTrace& t, double tol, int max_iters) {
  for (std::size_t k = 0; k < t.rel_residuals.size(); ++k)
    if (t.rel_residuals[k] <= tol) return static_cast<int>(k + 1);
  return max_iters;
}

struct ReuseSummary {
  int frames = 0;
  double median_cold = 0.0, median_warm = 0.0;
  double mean_cold = 0.0, mean_warm = 0.0;
};

/// For each stream and frame: a cold solve from zero and a warm solve from the
/// previous frame's warm z*. Frame 0 has no predecessor, so warm == cold.
/// Writes reuse.csv, reuse_curves.csv and reuse_summary.csv.
inline ReuseSummary sequence_reuse(const toyflow::ModelParams& p, const ExperimentConfig& c, const fs::path& out,
                                   std::ostream* log = nullptr) {
  fs::create_directories(out);
  const double tol = c.solver.rel_tol;
  const int budget = c.solver.max_iters;
  CsvWriter frames_csv(out / "reuse.csv",
                       {"stream", "frame", "cold_iters", "warm_iters", "cold_converged", "warm_converged",
                        "cold_abs_residual", "warm_abs_residual", "cold_epe", "warm_epe"},
                       100);
  CsvWriter curves_csv(out / "reuse_curves.csv", {"stream", "frame", "arm", "iter", "rel_residual"}, 1000);
  auto curve = [&](int stream, int frame, const char* arm, const SolverTrace& t) {
    curves_csv.row({stream, frame, arm, 0, t.initial_rel_residual});
    for (std::size_t k = 0; k < t.rel_residuals.size(); ++k)
      curves_csv.row({stream, frame, arm, static_cast<int>(k + 1), t.rel_residuals[k]});
  };

  const toyflow::SynthOptions opts = synth_options(c);
  std::vector<double> cold, warm;
  for (int s = 0; s < c.data.n_streams; ++s) {
    Rng rng = Rng(c.seed).split(kReuseStream).split(static_cast<std::uint64_t>(s));
    const auto seq = toyflow::synth_sequence(rng, static_cast<std::size_t>(c.data.frames), opts, c.data.smoothness);
    Vec previous;
    for (int t = 0; t < static_cast<int>(seq.size()); ++t) {
      const PairEval ce = evaluate_pair(p, seq[t], c.solver);
      const PairEval we = t == 0 ? ce : evaluate_pair(p, seq[t], c.solver, previous);
      const int ci = iterations_to_tol(ce.trace, tol, budget), wi = iterations_to_tol(we.trace, tol, budget);
      cold.push_back(ci);
      warm.push_back(wi);
      frames_csv.row({s, t, ci, wi, ce.trace.converged, we.trace.converged, ce.abs_residual, we.abs_residual, ce.epe,
                      we.epe});
      curve(s, t, "cold", ce.trace);
      curve(s, t, "warm", we.trace);
      previous = we.z_star;
    }
    if (log) *log << "stream " << s << " done\n";
  }
  ReuseSummary r;
  r.frames = static_cast<int>(cold.size());
  r.median_cold = median(cold);
  r.median_warm = median(warm);
  r.mean_cold = mean(cold);
  r.mean_warm = mean(warm);
  CsvWriter summary(out / "reuse_summary.csv",
                    {"frames", "median_cold_iters", "median_warm_iters", "warm_over_cold", "mean_cold_iters",
                     "mean_warm_iters"});
  summary.row({r.frames, r.median_cold, r.median_warm, r.median_warm / r.median_cold, r.mean_cold, r.mean_warm});
  return r;
}

// ---------------------------------------------------------------------------
// Residual vs EPE correlation

struct StudySummary {
  int n_samples = 0;
  std::optional<double> pearson_r;
};

/// Sample i uses max_disp_list[i % size]. Writes study.csv and study_summary.csv.
inline StudySummary correlation_study(const toyflow::ModelParams& p, const ExperimentConfig& c, const fs::path& out) {
  fs::create_directories(out);
  CsvWriter csv(out / "study.csv", {"sample", "max_disp", "epe", "abs_residual", "rel_residual", "mean_flow"}, 100);
  std::vector<double> residuals, epes;
  const Rng base = Rng(c.seed).split(kStudyStream);
  for (int i = 0; i < c.study.n_samples; ++i) {
    ExperimentConfig sc = c;
    sc.data.max_disp = c.study.max_disp_list[static_cast<std::size_t>(i) % c.study.max_disp_list.size()];
    Rng rng = base.split(static_cast<std::uint64_t>(i));
    const toyflow::FlowSample s = toyflow::synth_pair(rng, synth_options(sc));
    const PairEval e = evaluate_pair(p, s, c.solver);
    csv.row({i, sc.data.max_disp, e.epe, e.abs_residual, e.rel_residual, toyflow::mean_magnitude(s.f_gt)});
    residuals.push_back(e.abs_residual);
    epes.push_back(e.epe);
  }
  StudySummary r{c.study.n_samples, pearson(residuals, epes)};
  CsvWriter summary(out / "study_summary.csv", {"n_samples", "pearson_r"});
  summary.row({r.n_samples, r.pearson_r ? format_number(*r.pearson_r) : std::string(kUndefined)});
  return r;
}

// ---------------------------------------------------------------------------
// Solver benchmark

/// f(z) = A z + b with A = Q diag(l) Q^T symmetric, l_0 = radius and the rest
/// uniform in [-radius, radius]; b ~ N(0, I).
struct AffineMap {
  Eigen::MatrixXd a;
  Eigen::VectorXd b;

  Vec operator()(const Vec& z) const {
    const Eigen::Map<const Eigen::VectorXd> zm(z.data(), static_cast<Eigen::Index>(z.size()));
    const Eigen::VectorXd out = a * zm + b;
    return Vec(out.data(), out.data() + out.size());
  }
};

inline AffineMap random_contraction(int dim, double radius, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(dim);
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) g(i, j) = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  Eigen::VectorXd lam(n);
  for (Eigen::Index i = 0; i < n; ++i) lam(i) = i == 0 ? radius : radius * rng.uniform(-1.0, 1.0);
  AffineMap m;
  m.a = q * lam.asDiagonal() * q.transpose();
  m.b.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) m.b(i) = rng.normal();
  return m;
}

struct BenchRow {
  SolverMethod method;
  double radius = 0.0;
  int trial = 0;
  int iters = 0;
  bool converged = false;
  double final_rel_residual = 0.0;
  double wall_ms = 0.0;
};

struct BenchSummary {
  SolverMethod method;
  double radius = 0.0;
  double median_iters = 0.0;
  int converged = 0;
};

/// Every method solves the same seeded instances from z0 = 0 to relative
/// residual bench.tol. Writes bench.csv and bench_summary.csv.
inline std::vector<BenchSummary> bench_solvers(const ExperimentConfig& c, const fs::path& out) {
  fs::create_directories(out);
  const std::vector<SolverMethod> methods{SolverMethod::picard, SolverMethod::anderson, SolverMethod::broyden};
  CsvWriter csv(out / "bench.csv", {"method", "radius", "trial", "iters", "converged", "final_rel_residual", "wall_ms"},
                100);
  CsvWriter summary_csv(out / "bench_summary.csv", {"method", "radius", "median_iters", "converged_trials"});
  std::vector<BenchSummary> summaries;
  for (std::size_t ri = 0; ri < c.bench.radii.size(); ++ri) {
    const double radius = c.bench.radii[ri];
    std::vector<AffineMap> problems;
    for (int t = 0; t < c.bench.trials; ++t) {
      Rng rng = Rng(c.seed).split(kBenchStream).split(ri).split(static_cast<std::uint64_t>(t));
      problems.push_back(random_contraction(c.bench.dim, radius, rng));
    }
    for (SolverMethod m : methods) {
      SolverConfig sc = c.solver;
      sc.method = m;
      sc.max_iters = c.bench.max_iters;
      sc.rel_tol = c.bench.tol;
      sc.abs_tol = 0.0;
      sc.record = IterateRecording::none();
      std::vector<double> iters;
      int converged = 0;
      for (int t = 0; t < c.bench.trials; ++t) {
        const auto t0 = std::chrono::steady_clock::now();
        const SolveResult r = solve(problems[static_cast<std::size_t>(t)], Vec(static_cast<std::size_t>(c.bench.dim), 0.0), sc);
        const double ms =
            c.run.record_timing ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()
                                : 0.0;
        iters.push_back(r.trace.n_iters);
        converged += r.trace.converged;
        csv.row({to_string(m), radius, t, r.trace.n_iters, r.trace.converged, r.trace.final_rel_residual(), ms});
      }
      BenchSummary s{m, radius, median(iters), converged};
      summary_csv.row({to_string(m), radius, s.median_iters, s.converged});
      summaries.push_back(s);
    }
  }
  return summaries;
}

}  // namespace deqflow::harness
