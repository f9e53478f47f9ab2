#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deqflow/deq_layer.hpp"
#include "deqflow/harness/config.hpp"
#include "deqflow/harness/csv.hpp"
#include "deqflow/harness/optim.hpp"
#include "deqflow/toyflow/metrics.hpp"
#include "deqflow/toyflow/model.hpp"
#include "deqflow/toyflow/synth.hpp"

namespace deqflow::harness {

/// Training gave up after too many consecutive non-finite steps. Maps to exit code 3.
class NumericalAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Rng stream ids under the experiment seed.
inline constexpr std::uint64_t kTrainStream = 1, kAuxStream = 2, kEvalStream = 3, kReuseStream = 4,
                               kStudyStream = 5, kBenchStream = 6;

inline toyflow::SynthOptions synth_options(const ExperimentConfig& c) {
  toyflow::SynthOptions o;
  o.height = c.model.image_height;
  o.width = c.model.image_width;
  o.stride = toyflow::ModelConfig::stride;
  o.max_disp = c.data.max_disp;
  o.translation_only = c.data.translation_only;
  o.linear_scale = c.data.linear_scale;
  return o;
}

/// Sample b of training step s. Depends on the seed and data settings only,
/// so every arm of an experiment sees the same stream.
inline toyflow::FlowSample train_sample(const ExperimentConfig& c, int step, int b) {
  Rng rng = Rng(c.seed).split(kTrainStream).split(static_cast<std::uint64_t>(step)).split(static_cast<std::uint64_t>(b));
  return toyflow::synth_pair(rng, synth_options(c));
}

inline std::vector<toyflow::FlowSample> eval_set(const ExperimentConfig& c) {
  std::vector<toyflow::FlowSample> out;
  const Rng base = Rng(c.seed).split(kEvalStream);
  for (int i = 0; i < c.data.eval_samples; ++i) {
    Rng rng = base.split(static_cast<std::uint64_t>(i));
    out.push_back(toyflow::synth_pair(rng, synth_options(c)));
  }
  return out;
}

/// Relative residual of the iterate the solver returned.
inline double returned_rel_residual(const SolverTrace& t) {
  if (t.best_iter <= 0 || t.rel_residuals.empty()) return t.initial_rel_residual;
  return t.rel_residuals[static_cast<std::size_t>(t.best_iter - 1)];
}

/// Flow block of z at feature resolution, as [2,H/8,W/8].
inline Tensor state_flow(const Vec& z, const StateLayout& layout) {
  return EquilibriumState::unflatten(z, layout).f;
}

struct SampleResult {
  Vec grad;  // d loss / d theta
  LossParts loss;
  double jr_estimate = 0.0;
  double total = 0.0;  // loss.total + coeff * jr_estimate
  SolverTrace trace;
  bool adjoint_fallback = false;
};

/// forward_solve -> assemble_loss -> backward_grads (+ Jacobian penalty) ->
/// encoder backward, for one pair.
inline SampleResult sample_gradient(const toyflow::ModelParams& p, const toyflow::FlowSample& s,
                                    const ExperimentConfig& c, Rng& aux) {
  const StateLayout layout = toyflow::state_layout(p.config);
  const CorrectionSchedule schedule = c.schedule();
  const toyflow::PreparedPair pp = toyflow::prepare_pair(p, s.p1, s.p2);
  const VjpBundle bundle = toyflow::make_bundle(p, pp.x);

  SampleResult out;
  ForwardResult fr = forward_solve(bundle.map, layout, c.solver, schedule, ReuseState{}, 0, &aux);
  // With loss_on = map_output the distances are taken on f(z*) and f(z^[i]),
  // so the 1-step gradient at each state is exact for its own term.
  const bool on_outputs = c.correction.loss_on == "map_output";
  std::vector<std::pair<int, Vec>> scored = fr.corrections;
  if (on_outputs)
    for (auto& [i, z] : scored) z = bundle.map(z);
  out.loss = assemble_loss(on_outputs ? bundle.map(fr.z_star) : fr.z_star, scored, s.f_gt_feat, schedule,
                           parse_loss_kind(c.correction.loss), layout);
  BackwardResult br = backward_grads(bundle, fr.z_star, fr.corrections, out.loss, c.gradient_mode());
  out.adjoint_fallback = br.adjoint_fallback;
  out.total = out.loss.total;
  if (c.jacobian_reg.coeff > 0) {
    const JacobianPenalty jp =
        jacobian_penalty(bundle, fr.z_star, c.jacobian_reg.probes, aux,
                         parse_probe_distribution(c.jacobian_reg.distribution), c.jacobian_reg.fd_step);
    out.jr_estimate = jp.estimate;
    out.total += c.jacobian_reg.coeff * jp.estimate;
    axpy(c.jacobian_reg.coeff, jp.param_grad, br.param_grad);
  }
  out.grad = toyflow::context_backward(p, pp, br.param_grad);
  out.trace = std::move(fr.trace);
  return out;
}

struct PairEval {
  double epe = 0.0, f1_all = 0.0;
  double abs_residual = 0.0, rel_residual = 0.0;
  SolverTrace trace;
  Vec z_star;
};

/// Solves from z0 (zero when empty) and scores the upsampled flow against f_gt.
inline PairEval evaluate_pair(const toyflow::ModelParams& p, const toyflow::FlowSample& s, const SolverConfig& solver,
                              const Vec& z0 = {}) {
  const StateLayout layout = toyflow::state_layout(p.config);
  const toyflow::PreparedPair pp = toyflow::prepare_pair(p, s.p1, s.p2);
  auto map = [&](const Vec& z) { return toyflow::apply_update(p, pp.x, z); };
  SolveResult sol = solve(map, z0.empty() ? Vec(layout.size(), 0.0) : z0, solver);
  PairEval out;
  const Tensor flow = toyflow::upsample_flow(state_flow(sol.z_star, layout), toyflow::ModelConfig::stride);
  out.epe = toyflow::epe(flow, s.f_gt);
  out.f1_all = toyflow::f1_all(flow, s.f_gt);
  out.abs_residual = sol.trace.best_residual;
  out.rel_residual = returned_rel_residual(sol.trace);
  out.trace = std::move(sol.trace);
  out.z_star = std::move(sol.z_star);
  return out;
}

struct EvalRecord {
  int step = 0;
  double aepe = 0.0, f1_all = 0.0, mean_residual = 0.0;
};

inline EvalRecord evaluate(const toyflow::ModelParams& p, const std::vector<toyflow::FlowSample>& set,
                           const SolverConfig& solver, int step) {
  EvalRecord r{step};
  for (const auto& s : set) {
    const PairEval e = evaluate_pair(p, s, solver);
    r.aepe += e.epe;
    r.f1_all += e.f1_all;
    r.mean_residual += e.abs_residual;
  }
  const auto n = static_cast<double>(set.size());
  r.aepe /= n;
  r.f1_all /= n;
  r.mean_residual /= n;
  return r;
}

struct StepRecord {
  int step = 0;
  double loss_total = 0.0, loss_main = 0.0, loss_cor = 0.0;
  long fwd_iters = 0;  // sum of n_iters over the batch
  double abs_residual = 0.0, rel_residual = 0.0;  // batch means at the returned iterates
  double wall_ms = 0.0;
  bool skipped = false;
};

struct TrainResult {
  toyflow::ModelParams params;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  int skipped_steps = 0;
};

inline const std::vector<std::string> kTrainHeader{"step",     "loss_total",   "loss_main",    "loss_cor",
                                                   "fwd_iters", "abs_residual", "rel_residual", "wall_ms"};
inline const std::vector<std::string> kEvalHeader{"step", "aepe", "f1_all", "mean_residual"};

inline void write_config(const std::filesystem::path& out, const ExperimentConfig& c) {
  std::ofstream(out / "config.json", std::ios::trunc) << to_json(c).dump(2) << '\n';
}

inline void eval_row(CsvWriter& w, const EvalRecord& e) { w.row({e.step, e.aepe, e.f1_all, e.mean_residual}); }

/// Loads run.checkpoint when set, adopting its model config; otherwise fresh
/// parameters from the model config.
inline toyflow::ModelParams resolve_model(ExperimentConfig& c) {
  if (c.run.checkpoint.empty()) return toyflow::init_params(c.model);
  toyflow::ModelParams p = toyflow::load_checkpoint(c.run.checkpoint);
  c.model = p.config;
  c.validate();
  return p;
}

/// AdamW training on seeded synthetic batches, starting from run.checkpoint
/// when set. Writes config.json, train_log.csv, eval_log.csv and checkpoint/
/// under `out`. Evaluates before the first step, every run.eval_every steps
/// and after the last step.
inline TrainResult train(ExperimentConfig c, const std::filesystem::path& out, std::ostream* log = nullptr) {
  c.validate();
  TrainResult res{resolve_model(c), {}, {}, 0};
  std::filesystem::create_directories(out);
  write_config(out, c);
  toyflow::ModelParams& p = res.params;

  CsvWriter train_log(out / "train_log.csv", kTrainHeader, c.run.flush_every);
  CsvWriter eval_log(out / "eval_log.csv", kEvalHeader, 1);
  AdamW opt(p.theta.size(), c.optimizer.lr, c.optimizer.beta1, c.optimizer.beta2, c.optimizer.eps,
            c.optimizer.weight_decay);

  std::vector<toyflow::FlowSample> eval_samples;
  auto run_eval = [&](int step) {
    if (eval_samples.empty()) eval_samples = eval_set(c);
    const EvalRecord e = evaluate(p, eval_samples, c.solver, step);
    res.evals.push_back(e);
    eval_row(eval_log, e);
    if (log) *log << "eval step " << step << " aepe " << format_number(e.aepe) << '\n';
  };

  if (c.run.steps > 0) run_eval(0);
  int consecutive = 0;
  for (int step = 1; step <= c.run.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    StepRecord rec{step};
    Vec grad(p.theta.size(), 0.0);
    bool finite = true;
    const Rng aux_base = Rng(c.seed).split(kAuxStream).split(static_cast<std::uint64_t>(step));
    for (int b = 0; b < c.data.batch_size; ++b) {
      const toyflow::FlowSample s = train_sample(c, step, b);
      Rng aux = aux_base.split(static_cast<std::uint64_t>(b));
      const SampleResult r = sample_gradient(p, s, c, aux);
      rec.loss_total += r.total;
      rec.loss_main += r.loss.main;
      rec.loss_cor += r.loss.correction;
      rec.fwd_iters += r.trace.n_iters;
      rec.abs_residual += r.trace.best_residual;
      rec.rel_residual += returned_rel_residual(r.trace);
      finite = finite && !r.trace.diverged && std::isfinite(r.total) && all_finite(r.grad);
      if (finite) axpy(1.0, r.grad, grad);
    }
    const auto nb = static_cast<double>(c.data.batch_size);
    rec.loss_total /= nb;
    rec.loss_main /= nb;
    rec.loss_cor /= nb;
    rec.abs_residual /= nb;
    rec.rel_residual /= nb;
    if (finite) {
      for (double& g : grad) g /= nb;
      clip_grad_norm(grad, c.optimizer.clip_norm);
      opt.step(p.theta, grad);
      consecutive = 0;
    } else {
      rec.skipped = true;
      ++res.skipped_steps;
      ++consecutive;
      if (log) *log << "step " << step << ": non-finite loss or gradient, skipped\n";
    }
    if (c.run.record_timing)
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    train_log.row({rec.step, rec.loss_total, rec.loss_main, rec.loss_cor, rec.fwd_iters, rec.abs_residual,
                   rec.rel_residual, rec.wall_ms});
    res.steps.push_back(rec);
    if (consecutive > c.run.max_consecutive_skips) {
      train_log.flush();
      throw NumericalAbort("aborting after " + std::to_string(consecutive) +
                           " consecutive non-finite steps (last at step " + std::to_string(step) + ")");
    }
    if (step % c.run.eval_every == 0 || step == c.run.steps) run_eval(step);
  }
  train_log.flush();
  toyflow::save_checkpoint(out / "checkpoint", p);
  return res;
}

}  // namespace deqflow::harness
