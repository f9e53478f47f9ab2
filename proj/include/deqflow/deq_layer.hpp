#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "deqflow/implicit_grad.hpp"
#include "deqflow/numerics/rng.hpp"
#include "deqflow/numerics/tensor.hpp"
#include "deqflow/solver.hpp"

namespace deqflow {

/// Shape of the equilibrium state z = (h, f) on an H x W feature grid.
struct StateLayout {
  std::size_t hidden_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t pixels() const { return height * width; }
  std::size_t hidden_size() const { return hidden_channels * pixels(); }
  std::size_t flow_size() const { return 2 * pixels(); }
  std::size_t size() const { return hidden_size() + flow_size(); }
  bool operator==(const StateLayout&) const = default;
};

/// Paired hidden state h [C_h,H,W] and flow f [2,H,W]. The solver vector is
/// h followed by f, both row-major.
struct EquilibriumState {
  Tensor h, f;

  static EquilibriumState zeros(const StateLayout& l) {
    return {Tensor({l.hidden_channels, l.height, l.width}), Tensor({2, l.height, l.width})};
  }

  Vec flatten() const {
    if (h.rank() != 3 || f.rank() != 3 || f.dim(0) != 2 || h.dim(1) != f.dim(1) || h.dim(2) != f.dim(2))
      throw ShapeError("EquilibriumState: h and f must share the spatial grid");
    Vec out(h.values());
    out.insert(out.end(), f.values().begin(), f.values().end());
    return out;
  }

  static EquilibriumState unflatten(const Vec& z, const StateLayout& l) {
    if (z.size() != l.size()) throw ShapeError("EquilibriumState::unflatten: length mismatch");
    const auto split = static_cast<std::ptrdiff_t>(l.hidden_size());
    return {Tensor({l.hidden_channels, l.height, l.width}, Vec(z.begin(), z.begin() + split)),
            Tensor({2, l.height, l.width}, Vec(z.begin() + split, z.end()))};
  }
};

inline std::span<const double> flow_part(const Vec& z, const StateLayout& l) {
  return std::span<const double>(z).subspan(l.hidden_size(), l.flow_size());
}

// ---------------------------------------------------------------------------
// Sparse fixed-point correction

enum class Placement { uniform, random };

inline Placement parse_placement(const std::string& s) {
  if (s == "uniform") return Placement::uniform;
  if (s == "random") return Placement::random;
  throw std::invalid_argument("unknown correction placement '" + s + "'");
}

struct CorrectionSchedule {
  int freq = 0;
  Vec gammas;
  Placement placement = Placement::uniform;

  /// gamma_i = 0.8^(r - i + 1), i = 1..r: the latest correction weighs most.
  static CorrectionSchedule geometric(int r, Placement placement = Placement::uniform) {
    CorrectionSchedule s{r, {}, placement};
    for (int i = 1; i <= r; ++i) s.gammas.push_back(std::pow(0.8, r - i + 1));
    return s;
  }

  void validate() const {
    if (freq < 0) throw std::invalid_argument("correction freq must be >= 0");
    if (gammas.size() != static_cast<std::size_t>(freq))
      throw std::invalid_argument("correction: need one gamma per correction term");
    for (double g : gammas)
      if (!(g > 0 && g < 1)) throw std::invalid_argument("correction gammas must lie in (0,1)");
  }
};

struct CorrectionIndices {
  std::vector<int> indices;
  bool truncated = false;  // fewer than r interior points were available
};

/// Uniform: floor(i * n / (r + 1)) for i = 1..r. Random: r distinct draws
/// from [1, n-1], sorted. With n < r + 1 every interior index is returned.
inline CorrectionIndices sample_correction_indices(int n_iters, int r, Placement placement,
                                                   Rng* rng = nullptr) {
  CorrectionIndices out;
  if (r <= 0) return out;
  if (n_iters < r + 1) {
    for (int i = 1; i < n_iters; ++i) out.indices.push_back(i);
    out.truncated = true;
    return out;
  }
  if (placement == Placement::uniform) {
    for (int i = 1; i <= r; ++i)
      out.indices.push_back(static_cast<int>((static_cast<long long>(i) * n_iters) / (r + 1)));
  } else {
    if (!rng) throw std::invalid_argument("random correction placement needs an Rng");
    out.indices = rng->sample_without_replacement(r, 1, n_iters - 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixed-point reuse

struct ReuseState {
  std::optional<Vec> z;
  std::uint64_t stream_id = 0;

  bool usable(std::uint64_t stream, std::size_t dim) const {
    return z && stream_id == stream && z->size() == dim;
  }
};

inline ReuseState advance_reuse(const ReuseState& /*previous*/, const Vec& z_star, std::uint64_t stream_id) {
  return ReuseState{z_star, stream_id};
}

// ---------------------------------------------------------------------------
// Forward

struct ForwardResult {
  Vec z_star;
  SolverTrace trace;  // carries no iterates; correction states live below
  std::vector<std::pair<int, Vec>> corrections;
  bool warm_started = false;
  bool indices_truncated = false;

  /// States kept alive for the backward pass: z* plus one per correction.
  std::size_t retained_states() const { return 1 + corrections.size(); }
};

/// Solves z* = f(z*) from the reused state (if it belongs to `stream_id` and
/// has the right size) or from zero, keeping only the iterates needed by the
/// correction schedule. Indices are laid out over the solver budget; if the
/// solve stops before an index is reached, z* stands in for that iterate.
template <StateMap F>
ForwardResult forward_solve(F&& op, const StateLayout& layout, const SolverConfig& cfg,
                            const CorrectionSchedule& schedule, const ReuseState& reuse,
                            std::uint64_t stream_id = 0, Rng* rng = nullptr) {
  schedule.validate();
  ForwardResult out;
  const CorrectionIndices idx =
      sample_correction_indices(cfg.max_iters, schedule.freq, schedule.placement, rng);
  out.indices_truncated = idx.truncated;

  SolverConfig run = cfg;
  run.record = idx.indices.empty() ? IterateRecording::none() : IterateRecording::sampled(idx.indices);

  Vec z0(layout.size(), 0.0);
  if (reuse.usable(stream_id, layout.size())) {
    z0 = *reuse.z;
    out.warm_started = true;
  }
  SolveResult sol = solve(op, std::move(z0), run);
  out.z_star = std::move(sol.z_star);
  std::vector<std::pair<int, Vec>> recorded = std::move(sol.trace.recorded_iterates);
  sol.trace.recorded_iterates.clear();
  out.trace = std::move(sol.trace);

  for (int i : idx.indices) {
    auto it = std::find_if(recorded.begin(), recorded.end(), [&](const auto& p) { return p.first == i; });
    out.corrections.emplace_back(i, it != recorded.end() ? std::move(it->second) : out.z_star);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

enum class LossKind { sq_l2, l1 };

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "sq_l2") return LossKind::sq_l2;
  if (s == "l1") return LossKind::l1;
  throw std::invalid_argument("unknown loss kind '" + s + "'");
}

struct LossParts {
  double total = 0.0;
  double main = 0.0;
  double correction = 0.0;         // sum_i gamma_i * dist_i
  Vec main_cotangent;              // dL/dz*, zero on the h block
  std::vector<Vec> correction_cotangents;  // gamma_i * d dist_i / dz^[i]
};

namespace detail {

inline double flow_distance(std::span<const double> f, const Tensor& gt, LossKind kind, Vec* cot,
                            std::size_t cot_offset, double weight) {
  if (f.size() != gt.size()) throw ShapeError("loss: flow and ground truth differ in size");
  double d = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double e = f[i] - gt[i];
    if (kind == LossKind::sq_l2) {
      d += e * e;
      if (cot) (*cot)[cot_offset + i] = weight * 2.0 * e;
    } else {
      d += std::abs(e);
      if (cot) (*cot)[cot_offset + i] = weight * (e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0));
    }
  }
  return d;
}

}  // namespace detail

/// total = dist(f*, f_gt) + sum_i gamma_i dist(f^[i], f_gt); only the flow
/// block of each state enters.
inline LossParts assemble_loss(const Vec& z_star, const std::vector<std::pair<int, Vec>>& corrections,
                               const Tensor& f_gt, const CorrectionSchedule& schedule, LossKind kind,
                               const StateLayout& layout) {
  if (f_gt.size() != layout.flow_size()) throw ShapeError("assemble_loss: f_gt shape mismatch");
  if (z_star.size() != layout.size()) throw ShapeError("assemble_loss: state size mismatch");
  if (corrections.size() > schedule.gammas.size())
    throw std::invalid_argument("assemble_loss: more correction states than weights");
  LossParts out;
  out.main_cotangent.assign(layout.size(), 0.0);
  out.main = detail::flow_distance(flow_part(z_star, layout), f_gt, kind, &out.main_cotangent,
                                   layout.hidden_size(), 1.0);
  for (std::size_t i = 0; i < corrections.size(); ++i) {
    const Vec& zi = corrections[i].second;
    if (zi.size() != layout.size()) throw ShapeError("assemble_loss: correction state size mismatch");
    const double gamma = schedule.gammas[i];
    Vec cot(layout.size(), 0.0);
    out.correction += gamma * detail::flow_distance(flow_part(zi, layout), f_gt, kind, &cot,
                                                    layout.hidden_size(), gamma);
    out.correction_cotangents.push_back(std::move(cot));
  }
  out.total = out.main + out.correction;
  return out;
}

// ---------------------------------------------------------------------------
// Backward

struct BackwardResult {
  Vec param_grad;
  bool adjoint_fallback = false;  // ift diverged, 1-step gradient used instead
  std::optional<SolverTrace> adjoint_trace;
};

/// Main term through `mode` at z*; each correction term through a 1-step
/// gradient at its own state. Reads nothing but z* and the correction states.
inline BackwardResult backward_grads(const VjpBundle& bundle, const Vec& z_star,
                                     const std::vector<std::pair<int, Vec>>& corrections,
                                     const LossParts& loss, const GradientMode& mode) {
  validate(mode);
  if (loss.correction_cotangents.size() != corrections.size())
    throw std::invalid_argument("backward_grads: cotangent count differs from correction count");
  BackwardResult out;
  if (const auto* ift = std::get_if<IftMode>(&mode)) {
    IftResult r = ift_gradient(bundle, z_star, loss.main_cotangent, ift->backward);
    out.adjoint_trace = std::move(r.adjoint_trace);
    if (r.diverged || !all_finite(r.param_grad)) {
      out.adjoint_fallback = true;
      out.param_grad = bundle.vjp_theta(z_star, loss.main_cotangent);
    } else {
      out.param_grad = std::move(r.param_grad);
    }
  } else {
    out.param_grad = mode_gradient(bundle, z_star, loss.main_cotangent, std::get<PhantomMode>(mode));
  }
  for (std::size_t i = 0; i < corrections.size(); ++i) {
    const Vec g = bundle.vjp_theta(corrections[i].second, loss.correction_cotangents[i]);
    axpy(1.0, g, out.param_grad);
  }
  return out;
}

}  // namespace deqflow
