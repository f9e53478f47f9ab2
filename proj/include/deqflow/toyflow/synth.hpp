#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "deqflow/numerics/rng.hpp"
#include "deqflow/numerics/tensor.hpp"
#include "deqflow/toyflow/metrics.hpp"

namespace deqflow::toyflow {

/// Band-limited random field: a sum of plane waves per colour channel,
/// normalised into [0, 1]. Defined on the whole plane, so warped copies are
/// sampled exactly.
struct Texture {
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::array<std::vector<Wave>, 3> waves;

  double operator()(std::size_t c, double x, double y) const {
    double s = 0.0, norm = 0.0;
    for (const Wave& w : waves[c]) {
      s += w.amp * std::sin(2.0 * std::numbers::pi * (w.kx * x + w.ky * y) + w.phase);
      norm += w.amp;
    }
    return 0.5 + 0.5 * s / norm;
  }
};

/// Wavelengths between 6 and 32 pixels, amplitude falling with frequency.
inline Texture random_texture(Rng& rng, int waves_per_channel = 12) {
  Texture t;
  for (auto& ch : t.waves)
    for (int i = 0; i < waves_per_channel; ++i) {
      const double freq = rng.uniform(1.0 / 32.0, 1.0 / 6.0);
      const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
      ch.push_back({freq * std::cos(dir), freq * std::sin(dir), rng.uniform(0.0, 2.0 * std::numbers::pi),
                    rng.uniform(0.5, 1.0) / (32.0 * freq)});
    }
  return t;
}

/// w(c) = c + m (c - centre) + t: the displacement of pixel c between frames.
struct AffineWarp {
  double m00 = 0, m01 = 0, m10 = 0, m11 = 0;  // A - I
  double tx = 0, ty = 0;
  double cx = 0, cy = 0;  // centre

  std::array<double, 2> flow(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    return {m00 * dx + m01 * dy + tx, m10 * dx + m11 * dy + ty};
  }

  std::array<double, 2> inverse(double x, double y) const {
    const double a = 1 + m00, b = m01, c = m10, d = 1 + m11;
    const double det = a * d - b * c;
    if (std::abs(det) < 1e-12) throw std::domain_error("AffineWarp: singular linear part");
    const double u = x - cx - tx, v = y - cy - ty;
    return {cx + (d * u - b * v) / det, cy + (-c * u + a * v) / det};
  }

  /// Largest displacement over the image (attained at a corner).
  double max_displacement(std::size_t h, std::size_t w) const {
    double m = 0.0;
    for (double x : {0.0, static_cast<double>(w - 1)})
      for (double y : {0.0, static_cast<double>(h - 1)}) {
        const auto f = flow(x, y);
        m = std::max(m, std::hypot(f[0], f[1]));
      }
    return m;
  }

  /// Scales (A - I, t) so that no displacement exceeds max_disp.
  void clamp(std::size_t h, std::size_t w, double max_disp) {
    const double m = max_displacement(h, w);
    if (m <= max_disp) return;
    const double s = max_disp / m;
    m00 *= s, m01 *= s, m10 *= s, m11 *= s, tx *= s, ty *= s;
  }

  /// this o other.
  AffineWarp after(const AffineWarp& o) const {
    const double a = 1 + m00, b = m01, c = m10, d = 1 + m11;
    const double oa = 1 + o.m00, ob = o.m01, oc = o.m10, od = 1 + o.m11;
    AffineWarp r = *this;
    r.m00 = a * oa + b * oc - 1;
    r.m01 = a * ob + b * od;
    r.m10 = c * oa + d * oc;
    r.m11 = c * ob + d * od - 1;
    r.tx = a * o.tx + b * o.ty + tx;
    r.ty = c * o.tx + d * o.ty + ty;
    return r;
  }
};

struct FlowSample {
  Tensor p1, p2;      // [3,H,W] in [0,1]
  Tensor f_gt;        // [2,H,W] image pixels
  Tensor f_gt_feat;   // [2,H/S,W/S] feature pixels
  AffineWarp warp;    // p1 -> p2 displacement
  std::uint64_t seed = 0;
};

/// Renders T(W^-1(c)) for every pixel c.
inline Tensor render(const Texture& tex, const AffineWarp& w, std::size_t h, std::size_t wd) {
  Tensor img({3, h, wd});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wd; ++x) {
      const auto src = w.inverse(static_cast<double>(x), static_cast<double>(y));
      for (std::size_t c = 0; c < 3; ++c) img(c, y, x) = tex(c, src[0], src[1]);
    }
  return img;
}

inline Tensor flow_field(const AffineWarp& w, std::size_t h, std::size_t wd) {
  Tensor f({2, h, wd});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wd; ++x) {
      const auto d = w.flow(static_cast<double>(x), static_cast<double>(y));
      f(0, y, x) = d[0];
      f(1, y, x) = d[1];
    }
  return f;
}

struct SynthOptions {
  std::size_t height = 64, width = 64;
  std::size_t stride = 8;
  double max_disp = 4.0;
  bool translation_only = false;
  double linear_scale = 0.05;  // spread of the entries of A - I
};

inline void check_synth(const SynthOptions& o) {
  if (o.height % o.stride || o.width % o.stride) throw std::invalid_argument("synth: size not divisible by stride");
  if (!(o.max_disp >= 0) || o.max_disp >= static_cast<double>(std::min(o.height, o.width)) / 4.0)
    throw std::invalid_argument("synth: max_disp must lie in [0, min(H,W)/4)");
}

inline AffineWarp centred_warp(const SynthOptions& o) {
  AffineWarp w;
  w.cx = (static_cast<double>(o.width) - 1) / 2;
  w.cy = (static_cast<double>(o.height) - 1) / 2;
  return w;
}

inline FlowSample make_sample(const Texture& tex, const AffineWarp& from, const AffineWarp& motion,
                              const SynthOptions& o, std::uint64_t seed) {
  FlowSample s;
  s.p1 = render(tex, from, o.height, o.width);
  s.p2 = render(tex, motion.after(from), o.height, o.width);
  s.f_gt = flow_field(motion, o.height, o.width);
  s.f_gt_feat = downsample_flow(s.f_gt, o.stride);
  s.warp = motion;
  s.seed = seed;
  return s;
}

/// One image pair related by a random affine motion, displacement <= max_disp.
inline FlowSample synth_pair(Rng& rng, const SynthOptions& o) {
  check_synth(o);
  const std::uint64_t seed = rng.position();
  const Texture tex = random_texture(rng);
  AffineWarp m = centred_warp(o);
  m.tx = rng.uniform(-o.max_disp, o.max_disp);
  m.ty = rng.uniform(-o.max_disp, o.max_disp);
  if (!o.translation_only) {
    m.m00 = rng.uniform(-o.linear_scale, o.linear_scale);
    m.m01 = rng.uniform(-o.linear_scale, o.linear_scale);
    m.m10 = rng.uniform(-o.linear_scale, o.linear_scale);
    m.m11 = rng.uniform(-o.linear_scale, o.linear_scale);
  }
  m.clamp(o.height, o.width, o.max_disp);
  return make_sample(tex, centred_warp(o), m, o, seed);
}

/// A stream of n_pairs consecutive pairs (n_pairs + 1 frames) over one
/// texture. The frame-to-frame motion starts at zero and takes random-walk
/// steps scaled by `smoothness`, clamped to max_disp; smoothness 0 gives a
/// static scene.
inline std::vector<FlowSample> synth_sequence(Rng& rng, std::size_t n_pairs, const SynthOptions& o,
                                              double smoothness) {
  check_synth(o);
  if (!(smoothness >= 0)) throw std::invalid_argument("synth_sequence: smoothness must be >= 0");
  const std::uint64_t seed = rng.position();
  const Texture tex = random_texture(rng);
  AffineWarp pose = centred_warp(o), motion = centred_warp(o);
  std::vector<FlowSample> out;
  for (std::size_t t = 0; t < n_pairs; ++t) {
    motion.tx += smoothness * 0.5 * o.max_disp * rng.normal();
    motion.ty += smoothness * 0.5 * o.max_disp * rng.normal();
    if (!o.translation_only) {
      const double s = smoothness * 0.5 * o.linear_scale;
      motion.m00 += s * rng.normal();
      motion.m01 += s * rng.normal();
      motion.m10 += s * rng.normal();
      motion.m11 += s * rng.normal();
    }
    motion.clamp(o.height, o.width, o.max_disp);
    out.push_back(make_sample(tex, pose, motion, o, seed + t));
    pose = motion.after(pose);
  }
  return out;
}

}  // namespace deqflow::toyflow
