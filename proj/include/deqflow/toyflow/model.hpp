#pragma once

#include <memory>

#include "deqflow/deq_layer.hpp"
#include "deqflow/implicit_grad.hpp"
#include "deqflow/toyflow/encoder.hpp"
#include "deqflow/toyflow/update.hpp"

namespace deqflow::toyflow {

inline StateLayout state_layout(const ModelConfig& c) {
  return {c.hidden_channels, c.feature_height(), c.feature_width()};
}

/// Everything computed once per image pair, plus what the encoder backward needs.
struct PreparedPair {
  EncoderCache feat1, feat2, ctx;
  Tensor u1, u2;
  FlowContext x;
};

/// u1 = fnet(p1), u2 = fnet(p2), q = ReLU(cnet(p1)), C = pyramid(u1, u2).
inline PreparedPair prepare_pair(const ModelParams& p, const Tensor& p1, const Tensor& p2) {
  const ModelConfig& c = p.config;
  if (p1.shape() != Shape{3, c.image_height, c.image_width} || p2.shape() != p1.shape())
    throw ShapeError("prepare_pair: images must be [3," + std::to_string(c.image_height) + "," +
                     std::to_string(c.image_width) + "]");
  PreparedPair out;
  out.u1 = encode(p, "fnet", p1, &out.feat1);
  out.u2 = encode(p, "fnet", p2, &out.feat2);
  out.x.q = relu(encode(p, "cnet", p1, &out.ctx));
  out.x.pyr = correlation_pyramid(out.u1, out.u2, c.levels, c.radius);
  return out;
}

/// Size of the vector returned by the bundle's vjp_theta: theta, then the
/// cotangent of q, then one block per pyramid level.
inline std::size_t bundle_param_size(const ModelParams& p, const FlowContext& x) {
  return p.theta.size() + x.q.size() + x.pyr.numel();
}

/// z -> f_theta(z, x) on the flattened (h, f) state.
inline Vec apply_update(const ModelParams& p, const FlowContext& x, const Vec& z, UpdateCache* cache = nullptr) {
  const StateLayout layout = state_layout(p.config);
  const EquilibriumState s = EquilibriumState::unflatten(z, layout);
  auto [h, f] = update_forward(p, x, s.h, s.f, cache);
  return EquilibriumState{std::move(h), std::move(f)}.flatten();
}

/// VJP bundle for f_theta(., x). The last forward activation is cached, so
/// repeated products at z* (adjoint solves, probes) cost one reverse pass each.
/// `p` and `x` must outlive the bundle.
inline VjpBundle make_bundle(const ModelParams& p, const FlowContext& x) {
  struct State {
    Vec z;
    UpdateCache cache;
    bool valid = false;
  };
  auto st = std::make_shared<State>();
  const StateLayout layout = state_layout(p.config);
  auto ensure = [st, &p, &x](const Vec& z) -> const UpdateCache& {
    if (!st->valid || st->z != z) {
      apply_update(p, x, z, &st->cache);
      st->z = z;
      st->valid = true;
    }
    return st->cache;
  };

  VjpBundle b;
  b.map = [&p, &x](const Vec& z) { return apply_update(p, x, z); };
  b.vjp_z = [ensure, layout, &p, &x](const Vec& z, const Vec& v) {
    const UpdateCache& cc = ensure(z);
    const EquilibriumState g = EquilibriumState::unflatten(v, layout);
    EquilibriumState out = EquilibriumState::zeros(layout);
    update_vjp(p, x, cc, g.h, g.f, {&out.h, &out.f, nullptr, nullptr, nullptr});
    return out.flatten();
  };
  b.vjp_theta = [ensure, layout, &p, &x](const Vec& z, const Vec& v) {
    const UpdateCache& cc = ensure(z);
    const EquilibriumState g = EquilibriumState::unflatten(v, layout);
    Vec theta(p.theta.size(), 0.0);
    Tensor gq(x.q.shape());
    std::vector<Tensor> levels;
    for (const Tensor& t : x.pyr.levels) levels.emplace_back(t.shape());
    update_vjp(p, x, cc, g.h, g.f, {nullptr, nullptr, &theta, &gq, &levels});
    theta.insert(theta.end(), gq.values().begin(), gq.values().end());
    for (const Tensor& t : levels) theta.insert(theta.end(), t.values().begin(), t.values().end());
    return theta;
  };
  // Adaptive damping: the GRU update gate on h, its channel mean per pixel on f.
  b.damping_field = [ensure, layout](const Vec& z) {
    const UpdateCache& cc = ensure(z);
    Vec lam(cc.gate_z.values());
    const std::size_t px = layout.pixels();
    Vec mean(px, 0.0);
    for (std::size_t ch = 0; ch < layout.hidden_channels; ++ch)
      for (std::size_t i = 0; i < px; ++i) mean[i] += cc.gate_z[ch * px + i];
    for (double& m : mean) m /= static_cast<double>(layout.hidden_channels);
    lam.insert(lam.end(), mean.begin(), mean.end());
    lam.insert(lam.end(), mean.begin(), mean.end());
    return lam;
  };
  return b;
}

/// Maps a bundle-sized gradient [theta | q | levels] to a theta gradient by
/// running the context and feature encoders backwards.
inline Vec context_backward(const ModelParams& p, const PreparedPair& pp, const Vec& bundle_grad) {
  if (bundle_grad.size() != bundle_param_size(p, pp.x))
    throw ShapeError("context_backward: gradient length mismatch");
  Vec grad(bundle_grad.begin(), bundle_grad.begin() + static_cast<std::ptrdiff_t>(p.theta.size()));
  std::size_t at = p.theta.size();
  auto take = [&](const Shape& s) {
    const std::size_t n = shape_numel(s);
    Tensor t(s, Vec(bundle_grad.begin() + static_cast<std::ptrdiff_t>(at),
                    bundle_grad.begin() + static_cast<std::ptrdiff_t>(at + n)));
    at += n;
    return t;
  };
  const Tensor gq = take(pp.x.q.shape());
  std::vector<Tensor> levels;
  for (const Tensor& t : pp.x.pyr.levels) levels.push_back(take(t.shape()));

  encode_vjp(p, "cnet", pp.ctx, relu_vjp(pp.ctx.out, gq), grad);
  auto [g1, g2] = correlation_pyramid_vjp(pp.u1, pp.u2, levels);
  encode_vjp(p, "fnet", pp.feat1, g1, grad);
  encode_vjp(p, "fnet", pp.feat2, g2, grad);
  return grad;
}

}  // namespace deqflow::toyflow
