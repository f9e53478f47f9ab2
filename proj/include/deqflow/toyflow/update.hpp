#pragma once

#include <Eigen/Core>

#include <cmath>
#include <vector>

#include "deqflow/toyflow/correlation.hpp"
#include "deqflow/toyflow/layers.hpp"
#include "deqflow/toyflow/params.hpp"

namespace deqflow::toyflow {

/// Input injection x = (q, C): context features and the correlation pyramid.
struct FlowContext {
  Tensor q;  // [C_q, H', W']
  CorrelationPyramid pyr;
};

/// Forward activations kept for the reverse pass.
struct UpdateCache {
  Tensor h, f;
  Tensor motion_in;   // [q, f, s * lookup]
  Tensor motion_pre;  // conv output before ReLU
  Tensor xm;          // motion features
  Tensor attn;        // [N, N] row-softmax weights (gma)
  Tensor value;       // [C_x, N] projected motion features (gma)
  Tensor query, key;  // [C_a, N] (gma)
  Tensor hx;          // [h, gin]
  Tensor gate_z, gate_r;
  Tensor rh;  // [r * h, gin]
  Tensor cand;
  Tensor h_next;
};

namespace detail {

using RowMatU = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapU = Eigen::Map<RowMatU>;
using CMapU = Eigen::Map<const RowMatU>;

inline CMapU as_matrix(const Tensor& t, std::size_t rows) {
  return CMapU(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(t.size() / rows));
}
inline MapU as_matrix(Tensor& t, std::size_t rows) {
  return MapU(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(t.size() / rows));
}

}  // namespace detail

inline double correlation_scale(const ModelConfig& c) { return 1.0 / std::sqrt(static_cast<double>(c.feature_channels)); }

/// One application of the update operator:
///   x   = ReLU(Conv([q, f, s * C(f + c0)]))           s = 1/sqrt(C_f)
///   x^  = Attention(q, q, x)                          (gma only)
///   z,r = sigmoid(Conv([h, gin])),  gin = [x, q] or [x^, x, q]
///   h'  = (1 - z) h + z tanh(Conv([r h, gin]))
///   f'  = f + Conv(h')
inline std::pair<Tensor, Tensor> update_forward(const ModelParams& p, const FlowContext& x, const Tensor& h,
                                                const Tensor& f, UpdateCache* cache = nullptr) {
  const ModelConfig& c = p.config;
  const std::size_t k = c.kernel, pad = k / 2;
  const std::size_t H = c.feature_height(), W = c.feature_width(), N = H * W;
  if (h.shape() != Shape{c.hidden_channels, H, W} || f.shape() != Shape{2, H, W})
    throw ShapeError("update: state shapes do not match the model");

  Tensor corr = correlation_lookup(x.pyr, f);
  corr *= correlation_scale(c);
  Tensor motion_in = concat_channels({&x.q, &f, &corr});
  Tensor motion_pre = conv(motion_in, p.ptr("motion.weight"), p.ptr("motion.bias"), c.motion_channels, k, pad);
  Tensor xm = relu(motion_pre);

  Tensor gin, attn, value, query, key;
  if (c.variant == Variant::gma) {
    const std::size_t ca = c.attention_channels;
    query = Tensor({ca, N});
    key = Tensor({ca, N});
    value = Tensor({c.motion_channels, N});
    detail::as_matrix(query, ca).noalias() =
        detail::CMapU(p.ptr("attn.query.weight"), ca, c.context_channels) * detail::as_matrix(x.q, c.context_channels);
    detail::as_matrix(key, ca).noalias() =
        detail::CMapU(p.ptr("attn.key.weight"), ca, c.context_channels) * detail::as_matrix(x.q, c.context_channels);
    detail::as_matrix(value, c.motion_channels).noalias() =
        detail::CMapU(p.ptr("attn.value.weight"), c.motion_channels, c.motion_channels) *
        detail::as_matrix(xm, c.motion_channels);
    attn = Tensor({N, N});
    auto a = detail::as_matrix(attn, N);
    a.noalias() = detail::as_matrix(query, ca).transpose() * detail::as_matrix(key, ca);
    a *= 1.0 / std::sqrt(static_cast<double>(ca));
    for (Eigen::Index n = 0; n < a.rows(); ++n) {
      const double mx = a.row(n).maxCoeff();
      a.row(n).array() = (a.row(n).array() - mx).exp();
      a.row(n) /= a.row(n).sum();
    }
    Tensor xhat({c.motion_channels, H, W});
    detail::as_matrix(xhat, c.motion_channels).noalias() = detail::as_matrix(value, c.motion_channels) * a.transpose();
    gin = concat_channels({&xhat, &xm, &x.q});
  } else {
    gin = concat_channels({&xm, &x.q});
  }

  const std::size_t ch = c.hidden_channels;
  Tensor hx = concat_channels({&h, &gin});
  Tensor gz = sigmoid(conv(hx, p.ptr("gru.update.weight"), p.ptr("gru.update.bias"), ch, k, pad));
  Tensor gr = sigmoid(conv(hx, p.ptr("gru.reset.weight"), p.ptr("gru.reset.bias"), ch, k, pad));
  Tensor rh_h = h;
  for (std::size_t i = 0; i < rh_h.size(); ++i) rh_h[i] *= gr[i];
  Tensor rh = concat_channels({&rh_h, &gin});
  Tensor cand = toyflow::tanh(conv(rh, p.ptr("gru.candidate.weight"), p.ptr("gru.candidate.bias"), ch, k, pad));
  Tensor h_next(h.shape());
  for (std::size_t i = 0; i < h.size(); ++i) h_next[i] = (1.0 - gz[i]) * h[i] + gz[i] * cand[i];
  Tensor f_next = f + conv(h_next, p.ptr("head.weight"), p.ptr("head.bias"), 2, k, pad);

  if (cache) {
    *cache = UpdateCache{h,          f,          std::move(motion_in), std::move(motion_pre), std::move(xm),
                         std::move(attn), std::move(value), std::move(query), std::move(key), std::move(hx),
                         std::move(gz), std::move(gr), std::move(rh), std::move(cand), h_next};
  }
  return {std::move(h_next), std::move(f_next)};
}

/// Cotangents flowing out of update_vjp. Null members are skipped.
struct UpdateGrads {
  Tensor* h = nullptr;
  Tensor* f = nullptr;
  Vec* theta = nullptr;                // same layout as ModelParams::theta
  Tensor* q = nullptr;
  std::vector<Tensor>* levels = nullptr;  // shaped like pyr.levels
};

/// Reverse mode of update_forward at the cached point for output cotangents
/// (g_h', g_f'). Everything accumulates into `out`.
inline void update_vjp(const ModelParams& p, const FlowContext& x, const UpdateCache& cc, const Tensor& g_hn,
                       const Tensor& g_fn, UpdateGrads out) {
  const ModelConfig& c = p.config;
  const ParamLayout& l = p.layout;
  const std::size_t k = c.kernel, pad = k / 2, ch = c.hidden_channels;
  const std::size_t H = c.feature_height(), W = c.feature_width(), N = H * W;
  const bool want_theta = out.theta != nullptr;
  auto gp = [&](const char* name) { return want_theta ? out.theta->data() + l.offset(name) : nullptr; };

  // f' = f + head(h')
  if (out.f) *out.f += g_fn;
  Tensor g_h_next = g_hn;
  conv_vjp(cc.h_next, p.ptr("head.weight"), 2, k, pad, 1, g_fn, &g_h_next, gp("head.weight"), gp("head.bias"));

  // h' = (1 - z) h + z cand
  Tensor g_h(cc.h.shape()), g_z_pre(cc.h.shape()), g_cand_pre(cc.h.shape());
  for (std::size_t i = 0; i < g_h.size(); ++i) {
    const double g = g_h_next[i], z = cc.gate_z[i], hc = cc.cand[i];
    g_h[i] = g * (1.0 - z);
    g_z_pre[i] = g * (hc - cc.h[i]) * z * (1.0 - z);
    g_cand_pre[i] = g * z * (1.0 - hc * hc);
  }

  Tensor g_gin({c.gru_in_channels(), H, W});
  Tensor g_rh(cc.rh.shape());
  conv_vjp(cc.rh, p.ptr("gru.candidate.weight"), ch, k, pad, 1, g_cand_pre, &g_rh, gp("gru.candidate.weight"),
           gp("gru.candidate.bias"));
  Tensor g_r_pre(cc.h.shape());
  for (std::size_t i = 0; i < g_h.size(); ++i) {
    const double g = g_rh[i], r = cc.gate_r[i];
    g_h[i] += g * r;
    g_r_pre[i] = g * cc.h[i] * r * (1.0 - r);
  }
  add_channels(g_rh, ch, g_gin);

  Tensor g_hx(cc.hx.shape());
  conv_vjp(cc.hx, p.ptr("gru.update.weight"), ch, k, pad, 1, g_z_pre, &g_hx, gp("gru.update.weight"),
           gp("gru.update.bias"));
  conv_vjp(cc.hx, p.ptr("gru.reset.weight"), ch, k, pad, 1, g_r_pre, &g_hx, gp("gru.reset.weight"),
           gp("gru.reset.bias"));
  for (std::size_t i = 0; i < g_h.size(); ++i) g_h[i] += g_hx[i];
  add_channels(g_hx, ch, g_gin);
  if (out.h) *out.h += g_h;

  // Split the GRU input cotangent.
  const std::size_t cx = c.motion_channels, cq = c.context_channels;
  std::size_t at = 0;
  Tensor g_xm({cx, H, W});
  if (c.variant == Variant::gma) {
    const Tensor g_xhat = slice_channels(g_gin, 0, cx);
    at = cx;
    const std::size_t ca = c.attention_channels;
    const auto a = detail::as_matrix(cc.attn, N);
    const auto gx_hat = detail::as_matrix(g_xhat, cx);
    const auto v = detail::as_matrix(cc.value, cx);
    // x^ = V A^T
    const detail::RowMatU g_v = gx_hat * a;
    detail::RowMatU g_a = gx_hat.transpose() * v;
    for (Eigen::Index n = 0; n < g_a.rows(); ++n) {
      const double s = (a.row(n).array() * g_a.row(n).array()).sum();
      g_a.row(n).array() = a.row(n).array() * (g_a.row(n).array() - s);
    }
    g_a *= 1.0 / std::sqrt(static_cast<double>(ca));
    const auto qm = detail::as_matrix(cc.query, ca), km = detail::as_matrix(cc.key, ca);
    const detail::RowMatU g_query = km * g_a.transpose();
    const detail::RowMatU g_key = qm * g_a;
    const auto xq = detail::as_matrix(x.q, cq);
    const auto xmm = detail::as_matrix(cc.xm, cx);
    if (want_theta) {
      detail::MapU(gp("attn.query.weight"), ca, cq).noalias() += g_query * xq.transpose();
      detail::MapU(gp("attn.key.weight"), ca, cq).noalias() += g_key * xq.transpose();
      detail::MapU(gp("attn.value.weight"), cx, cx).noalias() += g_v * xmm.transpose();
    }
    if (out.q) {
      auto gq = detail::as_matrix(*out.q, cq);
      gq.noalias() += detail::CMapU(p.ptr("attn.query.weight"), ca, cq).transpose() * g_query;
      gq.noalias() += detail::CMapU(p.ptr("attn.key.weight"), ca, cq).transpose() * g_key;
    }
    detail::as_matrix(g_xm, cx).noalias() += detail::CMapU(p.ptr("attn.value.weight"), cx, cx).transpose() * g_v;
  }
  add_channels(g_gin, at, g_xm);
  if (out.q) add_channels(g_gin, at + cx, *out.q);

  // Motion encoder.
  const Tensor g_motion_pre = relu_vjp(cc.motion_pre, std::move(g_xm));
  Tensor g_motion_in(cc.motion_in.shape());
  conv_vjp(cc.motion_in, p.ptr("motion.weight"), cx, k, pad, 1, g_motion_pre, &g_motion_in, gp("motion.weight"),
           gp("motion.bias"));
  if (out.q) add_channels(g_motion_in, 0, *out.q);
  if (out.f) add_channels(g_motion_in, cq, *out.f);
  if (out.f || out.levels) {
    Tensor g_corr = slice_channels(g_motion_in, cq + 2, c.corr_channels());
    g_corr *= correlation_scale(c);
    correlation_lookup_vjp(x.pyr, cc.f, g_corr, out.f, out.levels);
  }
}

}  // namespace deqflow::toyflow
