#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "deqflow/numerics/tensor.hpp"

namespace deqflow {

// Black-box fixed-point solvers for z = f(z).
//
// Iteration convention: f(z0) is evaluated once up front; iteration k then
// forms the next iterate z_k from the history, evaluates f(z_k), and records
// the residual ||f(z_k) - z_k||. So n_iters equals the number of function
// evaluations after the one at z0, and a fixed point given as z0 (or a constant
// map) is reported as converged at iteration 1.

enum class SolverMethod { picard, anderson, broyden };

inline std::string to_string(SolverMethod m) {
  switch (m) {
    case SolverMethod::picard: return "picard";
    case SolverMethod::anderson: return "anderson";
    case SolverMethod::broyden: return "broyden";
  }
  return "?";
}

inline SolverMethod parse_solver_method(const std::string& s) {
  if (s == "picard") return SolverMethod::picard;
  if (s == "anderson") return SolverMethod::anderson;
  if (s == "broyden") return SolverMethod::broyden;
  throw std::invalid_argument("unknown solver method '" + s + "'");
}

struct IterateRecording {
  enum class Mode { none, sampled, all };
  Mode mode = Mode::none;
  std::vector<int> indices;

  static IterateRecording none() { return {}; }
  static IterateRecording all() { return {Mode::all, {}}; }
  static IterateRecording sampled(std::vector<int> idx) { return {Mode::sampled, std::move(idx)}; }

  bool wants(int k) const {
    switch (mode) {
      case Mode::none: return false;
      case Mode::all: return true;
      case Mode::sampled: return std::find(indices.begin(), indices.end(), k) != indices.end();
    }
    return false;
  }
};

struct SolverConfig {
  SolverMethod method = SolverMethod::anderson;
  int max_iters = 40;
  double rel_tol = 1e-3;
  double abs_tol = 0.0;
  int anderson_memory = 5;
  double anderson_beta = 1.0;
  /// Tikhonov weight, relative to the largest diagonal entry of the residual Gram matrix.
  double anderson_ridge = 1e-8;
  double picard_damping = 1.0;
  IterateRecording record;

  void validate() const {
    if (max_iters < 1) throw std::invalid_argument("solver: max_iters must be >= 1");
    if (rel_tol < 0 || abs_tol < 0) throw std::invalid_argument("solver: tolerances must be >= 0");
    if (anderson_memory < 1) throw std::invalid_argument("solver: anderson_memory must be >= 1");
    if (!(anderson_beta > 0 && anderson_beta <= 1))
      throw std::invalid_argument("solver: anderson_beta must lie in (0,1]");
    if (!(anderson_ridge > 0)) throw std::invalid_argument("solver: anderson_ridge must be > 0");
    if (!(picard_damping > 0 && picard_damping <= 1))
      throw std::invalid_argument("solver: picard_damping must lie in (0,1]");
  }
};

struct SolverTrace {
  Vec residuals;      // ||f(z_k) - z_k||, k = 1..n_iters
  Vec rel_residuals;  // residual / max(||f(z_k)||, 1e-8)
  int n_iters = 0;
  bool converged = false;
  bool diverged = false;
  double initial_residual = 0.0;
  double initial_rel_residual = 0.0;
  int best_iter = 0;  // 0 denotes the initial guess
  double best_residual = 0.0;
  int picard_fallbacks = 0;  // anderson: singular mixing systems
  int skipped_updates = 0;   // broyden: rejected rank-1 updates
  std::vector<std::pair<int, Vec>> recorded_iterates;

  double final_residual() const { return residuals.empty() ? initial_residual : residuals.back(); }
  double final_rel_residual() const {
    return rel_residuals.empty() ? initial_rel_residual : rel_residuals.back();
  }
  double min_residual() const {
    double m = initial_residual;
    for (double r : residuals) m = std::min(m, r);
    return m;
  }
};

struct SolveResult {
  Vec z_star;
  SolverTrace trace;
};

using FixedPointMap = std::function<Vec(const Vec&)>;

template <typename F>
concept StateMap = std::invocable<F&, const Vec&> &&
                   std::convertible_to<std::invoke_result_t<F&, const Vec&>, Vec>;

inline constexpr double kResidualFloor = 1e-8;

inline double relative_residual(double residual, double fz_norm) {
  return residual / std::max(fz_norm, kResidualFloor);
}

/// (1 - damping) * z + damping * fz
inline Vec damped_mix(const Vec& z, const Vec& fz, double damping) {
  if (z.size() != fz.size()) throw ShapeError("damped_mix: length mismatch");
  Vec out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = (1.0 - damping) * z[i] + damping * fz[i];
  return out;
}

template <StateMap F>
Vec picard_step(F&& f, const Vec& z, double damping) {
  if (!(damping > 0 && damping <= 1)) throw std::invalid_argument("picard_step: damping in (0,1]");
  return damped_mix(z, f(z), damping);
}

// ---------------------------------------------------------------------------
// Anderson mixing

struct AndersonEntry {
  Vec z, fz;
};

struct AndersonStep {
  Vec z;
  bool fell_back = false;
};

namespace detail {

// Gaussian elimination with partial pivoting; nullopt if singular.
inline std::optional<Vec> solve_dense(std::vector<Vec> a, Vec b) {
  const std::size_t n = b.size();
  double scale = 0.0;
  for (const auto& row : a)
    for (double v : row) scale = std::max(scale, std::abs(v));
  if (!(scale > 0) || !std::isfinite(scale)) return std::nullopt;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) <= 1e-14 * scale) return std::nullopt;
    std::swap(a[piv], a[col]);
    std::swap(b[piv], b[col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double m = a[r][col] / a[col][col];
      if (m == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r][c] -= m * a[col][c];
      b[r] -= m * b[col];
    }
  }
  Vec x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t c = i + 1; c < n; ++c) s -= a[i][c] * x[c];
    x[i] = s / a[i][i];
  }
  if (!all_finite(x)) return std::nullopt;
  return x;
}

}  // namespace detail

/// One Anderson update from the most recent history (oldest first). Mixing
/// weights minimise ||sum_i a_i g_i|| subject to sum_i a_i = 1, where
/// g_i = f(z_i) - z_i, via the bordered normal equations with a ridge term
/// on the Gram block. Two refinement sweeps against the unregularised system
/// remove the ridge bias when the constrained problem is well posed.
inline AndersonStep anderson_step(std::span<const AndersonEntry> history, double beta, double ridge) {
  if (history.empty()) throw std::invalid_argument("anderson_step: empty history");
  const std::size_t n = history.size();
  const std::size_t dim = history.back().z.size();
  auto picard = [&](bool flagged) {
    return AndersonStep{damped_mix(history.back().z, history.back().fz, beta), flagged};
  };
  if (n == 1) return picard(false);

  std::vector<Vec> g(n, Vec(dim));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) g[i][d] = history[i].fz[d] - history[i].z[d];

  std::vector<Vec> gram(n, Vec(n));
  double diag_max = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      gram[i][j] = gram[j][i] = dot(g[i], g[j]);
      if (i == j) diag_max = std::max(diag_max, gram[i][i]);
    }
  if (!std::isfinite(diag_max)) return picard(true);
  if (diag_max == 0.0) return picard(false);

  // Bordered system [[0, 1^T], [1, H]] [mu; a] = [1; 0].
  const std::size_t m = n + 1;
  std::vector<Vec> exact(m, Vec(m, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    exact[0][i + 1] = exact[i + 1][0] = 1.0;
    for (std::size_t j = 0; j < n; ++j) exact[i + 1][j + 1] = gram[i][j];
  }
  std::vector<Vec> regular = exact;
  for (std::size_t i = 1; i < m; ++i) regular[i][i] += ridge * diag_max;
  Vec rhs(m, 0.0);
  rhs[0] = 1.0;

  auto sol = detail::solve_dense(regular, rhs);
  if (!sol) return picard(true);
  for (int sweep = 0; sweep < 2; ++sweep) {
    Vec resid = rhs;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) resid[i] -= exact[i][j] * (*sol)[j];
    auto corr = detail::solve_dense(regular, resid);
    if (!corr) break;
    for (std::size_t i = 0; i < m; ++i) (*sol)[i] += (*corr)[i];
  }
  if (!all_finite(*sol)) return picard(true);

  Vec out(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = (*sol)[i + 1];
    for (std::size_t d = 0; d < dim; ++d)
      out[d] += a * ((1.0 - beta) * history[i].z[d] + beta * history[i].fz[d]);
  }
  return {std::move(out), false};
}

// ---------------------------------------------------------------------------
// Limited-memory good Broyden on g(z) = f(z) - z.

/// Inverse-Jacobian estimate B = -I + sum_i u_i v_i^T.
class BroydenInverse {
 public:
  explicit BroydenInverse(std::size_t dim) : dim_(dim) {}

  static constexpr double kMinDenominator = 1e-12;

  std::size_t dim() const { return dim_; }
  std::size_t rank() const { return us_.size(); }

  /// B * x
  Vec apply(const Vec& x) const {
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = -x[i];
    for (std::size_t k = 0; k < us_.size(); ++k) axpy(dot(vs_[k], x), us_[k], out);
    return out;
  }

  /// (x^T B)^T
  Vec apply_left(const Vec& x) const {
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = -x[i];
    for (std::size_t k = 0; k < us_.size(); ++k) axpy(dot(us_[k], x), vs_[k], out);
    return out;
  }

  /// Good-Broyden secant update; returns false (and leaves B unchanged)
  /// when |dz^T B dg| falls below kMinDenominator.
  bool update(const Vec& dz, const Vec& dg) {
    const Vec b_dg = apply(dg);
    const double denom = dot(dz, b_dg);
    if (!(std::abs(denom) >= kMinDenominator) || !std::isfinite(denom)) return false;
    Vec u(dz.size());
    for (std::size_t i = 0; i < dz.size(); ++i) u[i] = (dz[i] - b_dg[i]) / denom;
    Vec v = apply_left(dz);
    us_.push_back(std::move(u));
    vs_.push_back(std::move(v));
    return true;
  }

 private:
  std::size_t dim_;
  std::vector<Vec> us_, vs_;
};

/// z' = z - B g(z)
inline Vec broyden_step(const BroydenInverse& inv, const Vec& z, const Vec& g) {
  return z - inv.apply(g);
}

// ---------------------------------------------------------------------------

/// Solves z = f(z) from z0. Returns the iterate with the smallest residual
/// seen (z0 included). Non-finite values or norms abort the solve with
/// diverged=true.
template <StateMap F>
SolveResult solve(F&& f, Vec z0, const SolverConfig& cfg) {
  cfg.validate();
  SolveResult res;
  SolverTrace& tr = res.trace;

  Vec z = std::move(z0);
  Vec fz = f(z);
  if (fz.size() != z.size()) throw ShapeError("solve: map changed the state dimension");
  if (!all_finite(z) || !all_finite(fz)) {
    tr.diverged = true;
    tr.initial_residual = tr.best_residual = std::numeric_limits<double>::infinity();
    tr.initial_rel_residual = tr.initial_residual;
    res.z_star = std::move(z);
    return res;
  }

  auto residual_of = [](const Vec& a, const Vec& fa) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (fa[i] - a[i]) * (fa[i] - a[i]);
    return std::sqrt(s);
  };

  tr.initial_residual = residual_of(z, fz);
  tr.initial_rel_residual = relative_residual(tr.initial_residual, l2_norm(fz));
  Vec best = z;
  tr.best_residual = tr.initial_residual;

  std::vector<AndersonEntry> history;
  BroydenInverse inverse(z.size());

  for (int k = 1; k <= cfg.max_iters; ++k) {
    Vec z_next;
    Vec g_prev;
    switch (cfg.method) {
      case SolverMethod::picard:
        z_next = damped_mix(z, fz, cfg.picard_damping);
        break;
      case SolverMethod::anderson: {
        history.push_back({z, fz});
        if (history.size() > static_cast<std::size_t>(cfg.anderson_memory)) history.erase(history.begin());
        AndersonStep step = anderson_step(history, cfg.anderson_beta, cfg.anderson_ridge);
        if (step.fell_back) ++tr.picard_fallbacks;
        z_next = std::move(step.z);
        break;
      }
      case SolverMethod::broyden:
        g_prev = fz - z;
        z_next = broyden_step(inverse, z, g_prev);
        break;
    }

    Vec fz_next = f(z_next);
    if (!all_finite(z_next) || !all_finite(fz_next)) {
      tr.diverged = true;
      break;
    }
    if (cfg.method == SolverMethod::broyden) {
      const Vec g_next = fz_next - z_next;
      if (!inverse.update(z_next - z, g_next - g_prev)) ++tr.skipped_updates;
    }
    const double r = residual_of(z_next, fz_next);
    const double fz_norm = l2_norm(fz_next);
    if (!std::isfinite(r) || !std::isfinite(fz_norm)) {
      tr.diverged = true;
      break;
    }
    z = std::move(z_next);
    fz = std::move(fz_next);
    const double rel = relative_residual(r, fz_norm);
    tr.residuals.push_back(r);
    tr.rel_residuals.push_back(rel);
    tr.n_iters = k;
    if (r <= tr.best_residual) {
      best = z;
      tr.best_residual = r;
      tr.best_iter = k;
    }
    if (cfg.record.wants(k)) tr.recorded_iterates.emplace_back(k, z);
    if ((cfg.rel_tol > 0 && rel <= cfg.rel_tol) || (cfg.abs_tol > 0 && r <= cfg.abs_tol)) {
      tr.converged = true;
      break;
    }
  }
  res.z_star = std::move(best);
  return res;
}

}  // namespace deqflow
