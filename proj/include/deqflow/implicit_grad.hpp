#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <variant>

#include "deqflow/numerics/rng.hpp"
#include "deqflow/numerics/tensor.hpp"
#include "deqflow/solver.hpp"

namespace deqflow {

/// Derivative hooks of an equilibrium map f(z) (the input x and the
/// parameters are captured by the closures). vjp_theta returns the gradient
/// with respect to everything f depends on besides z, as one flat vector.
struct VjpBundle {
  std::function<Vec(const Vec& z, const Vec& v)> vjp_z;
  std::function<Vec(const Vec& z, const Vec& v)> vjp_theta;
  std::function<Vec(const Vec& z, const Vec& u)> jvp_z;   // optional
  std::function<Vec(const Vec& z)> map;                   // optional; f itself
  std::function<Vec(const Vec& z)> damping_field;         // optional; adaptive phantom damping
};

/// Exact implicit gradient: solve the adjoint fixed point with `backward`.
struct IftMode {
  SolverConfig backward;
};

/// Truncated damped Neumann series with k terms; k=1, damping=1 is the
/// 1-step gradient. With adaptive=true the per-element damping comes from
/// VjpBundle::damping_field instead of the scalar.
struct PhantomMode {
  int k = 1;
  double damping = 1.0;
  bool adaptive = false;
};

using GradientMode = std::variant<IftMode, PhantomMode>;

inline GradientMode one_step_gradient() { return PhantomMode{1, 1.0, false}; }

inline void validate(const GradientMode& mode) {
  if (const auto* p = std::get_if<PhantomMode>(&mode)) {
    if (p->k < 1) throw std::invalid_argument("phantom gradient needs k >= 1");
    if (!(p->damping > 0 && p->damping <= 1))
      throw std::invalid_argument("phantom damping must lie in (0,1]");
  } else {
    std::get<IftMode>(mode).backward.validate();
  }
}

struct IftResult {
  Vec param_grad;
  SolverTrace adjoint_trace;
  bool diverged = false;
};

/// Solves g = vjp_z(z*, g) + dL/dz* (cold start g0 = 0) and returns
/// vjp_theta(z*, g). An unconverged solve that never improved on g0 is
/// reported as diverged.
inline IftResult ift_gradient(const VjpBundle& bundle, const Vec& z_star, const Vec& dl_dz,
                              const SolverConfig& backward_cfg) {
  auto adjoint = [&](const Vec& g) {
    Vec out = bundle.vjp_z(z_star, g);
    axpy(1.0, dl_dz, out);
    return out;
  };
  SolveResult sol = solve(adjoint, Vec(dl_dz.size(), 0.0), backward_cfg);
  IftResult r;
  r.diverged = sol.trace.diverged || (!sol.trace.converged && sol.trace.best_iter == 0);
  r.adjoint_trace = std::move(sol.trace);
  r.param_grad = bundle.vjp_theta(z_star, sol.z_star);
  return r;
}

/// g <- damping * vjp_z(g) + dL/dz, repeated k-1 times from g = dL/dz, then
/// vjp_theta(z*, g).
inline Vec phantom_gradient(const VjpBundle& bundle, const Vec& z_star, const Vec& dl_dz, int k,
                            double damping) {
  if (k < 1) throw std::invalid_argument("phantom_gradient: k >= 1");
  Vec g = dl_dz;
  for (int i = 1; i < k; ++i) {
    Vec next = bundle.vjp_z(z_star, g);
    for (std::size_t j = 0; j < next.size(); ++j) next[j] = damping * next[j] + dl_dz[j];
    g = std::move(next);
  }
  return bundle.vjp_theta(z_star, g);
}

/// Element-wise damping variant (e.g. the recurrent update gate).
inline Vec phantom_gradient(const VjpBundle& bundle, const Vec& z_star, const Vec& dl_dz, int k,
                            const Vec& damping) {
  if (k < 1) throw std::invalid_argument("phantom_gradient: k >= 1");
  if (damping.size() != dl_dz.size()) throw ShapeError("phantom_gradient: damping field size");
  Vec g = dl_dz;
  for (int i = 1; i < k; ++i) {
    Vec next = bundle.vjp_z(z_star, g);
    for (std::size_t j = 0; j < next.size(); ++j) next[j] = damping[j] * next[j] + dl_dz[j];
    g = std::move(next);
  }
  return bundle.vjp_theta(z_star, g);
}

inline Vec mode_gradient(const VjpBundle& bundle, const Vec& z_star, const Vec& dl_dz,
                         const PhantomMode& mode) {
  if (mode.adaptive) {
    if (!bundle.damping_field) throw std::invalid_argument("adaptive damping needs a damping field");
    return phantom_gradient(bundle, z_star, dl_dz, mode.k, bundle.damping_field(z_star));
  }
  return phantom_gradient(bundle, z_star, dl_dz, mode.k, mode.damping);
}

enum class ProbeDistribution { gaussian, rademacher };

inline ProbeDistribution parse_probe_distribution(const std::string& s) {
  if (s == "gaussian") return ProbeDistribution::gaussian;
  if (s == "rademacher") return ProbeDistribution::rademacher;
  throw std::invalid_argument("unknown probe distribution '" + s + "'");
}

inline Vec draw_probe(Rng& rng, std::size_t dim, ProbeDistribution dist) {
  Vec e(dim);
  for (double& v : e) v = dist == ProbeDistribution::gaussian ? rng.normal() : rng.rademacher();
  return e;
}

/// Hutchinson estimate of ||J_f(z*)||_F^2 = tr(J^T J): mean of ||J^T e||^2
/// over probes (||J e||^2 when only a JVP is available).
inline double hutchinson_frobenius(const VjpBundle& bundle, const Vec& z_star, int n_probes, Rng& rng,
                                   ProbeDistribution dist) {
  if (n_probes < 1) throw std::invalid_argument("hutchinson_frobenius: n_probes >= 1");
  double acc = 0.0;
  for (int p = 0; p < n_probes; ++p) {
    const Vec e = draw_probe(rng, z_star.size(), dist);
    const Vec w = bundle.vjp_z ? bundle.vjp_z(z_star, e) : bundle.jvp_z(z_star, e);
    acc += dot(w, w);
  }
  return acc / n_probes;
}

struct JacobianPenalty {
  double estimate = 0.0;  // mean ||J e||^2
  Vec param_grad;         // gradient of the estimate w.r.t. the bundle's parameters
};

/// Hutchinson estimate of ||J||_F^2 together with its parameter gradient.
/// J e is a central difference of the map, and d||J e||^2/dtheta is the
/// central difference of vjp_theta along e:
///   [vjp_theta(z + h e, J e) - vjp_theta(z - h e, J e)] / h.
/// z* is held fixed (the penalty acts on f only).
inline JacobianPenalty jacobian_penalty(const VjpBundle& bundle, const Vec& z_star, int n_probes,
                                        Rng& rng, ProbeDistribution dist, double step = 1e-4) {
  if (!bundle.map && !bundle.jvp_z) throw std::invalid_argument("jacobian_penalty needs map or jvp_z");
  if (n_probes < 1) throw std::invalid_argument("jacobian_penalty: n_probes >= 1");
  JacobianPenalty out;
  for (int p = 0; p < n_probes; ++p) {
    const Vec e = draw_probe(rng, z_star.size(), dist);
    Vec zp = z_star, zm = z_star;
    axpy(step, e, zp);
    axpy(-step, e, zm);
    Vec je;
    if (bundle.jvp_z) {
      je = bundle.jvp_z(z_star, e);
    } else {
      je = bundle.map(zp) - bundle.map(zm);
      for (double& v : je) v /= 2 * step;
    }
    out.estimate += dot(je, je) / n_probes;
    Vec gp = bundle.vjp_theta(zp, je);
    const Vec gm = bundle.vjp_theta(zm, je);
    if (out.param_grad.empty()) out.param_grad.assign(gp.size(), 0.0);
    for (std::size_t i = 0; i < gp.size(); ++i) out.param_grad[i] += (gp[i] - gm[i]) / (step * n_probes);
  }
  return out;
}

/// Central-difference gradient check on n_coords randomly chosen coordinates.
/// Returns max |fd - grad| / max(|fd|, |grad|, 1e-8).
inline double finite_difference_check(const std::function<double(const Vec&)>& loss, const Vec& theta,
                                      const Vec& grad, double epsilon, int n_coords, Rng& rng) {
  if (!(epsilon > 0)) throw std::invalid_argument("finite_difference_check: epsilon > 0");
  if (n_coords < 1 || static_cast<std::size_t>(n_coords) > theta.size())
    throw std::invalid_argument("finite_difference_check: n_coords out of range");
  if (grad.size() != theta.size()) throw ShapeError("finite_difference_check: gradient length");
  const auto coords =
      rng.sample_without_replacement(n_coords, 0, static_cast<int>(theta.size()) - 1);
  double worst = 0.0;
  Vec probe = theta;
  for (int c : coords) {
    const auto i = static_cast<std::size_t>(c);
    probe[i] = theta[i] + epsilon;
    const double up = loss(probe);
    probe[i] = theta[i] - epsilon;
    const double down = loss(probe);
    probe[i] = theta[i];
    const double fd = (up - down) / (2 * epsilon);
    const double err = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace deqflow
