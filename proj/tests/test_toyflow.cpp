#include <gtest/gtest.h>

#include <filesystem>

#include "deqflow/solver.hpp"
#include "deqflow/toyflow/model.hpp"
#include "deqflow/toyflow/synth.hpp"

using namespace deqflow;
using namespace deqflow::toyflow;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor t(s);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

void randomize(ModelParams& p, Rng& rng, double scale) {
  for (double& v : p.theta) v = scale * rng.normal();
}

// ---------------------------------------------------------------------------
// Direct-loop oracles

Tensor conv_ref(const Tensor& in, const Tensor& w, const Tensor* b, int pad, int stride) {
  const int ci = static_cast<int>(in.dim(0)), h = static_cast<int>(in.dim(1)), wd = static_cast<int>(in.dim(2));
  const int co = static_cast<int>(w.dim(0)), k = static_cast<int>(w.dim(2));
  const int oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor out({static_cast<std::size_t>(co), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (int o = 0; o < co; ++o)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = b ? (*b)[static_cast<std::size_t>(o)] : 0.0;
        for (int c = 0; c < ci; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = y * stride - pad + ky, ix = x * stride - pad + kx;
              if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
              s += w(o, c, ky, kx) * in(c, iy, ix);
            }
        out(o, y, x) = s;
      }
  return out;
}

double bilinear_ref(const Tensor& lv, std::size_t src, double x, double y) {
  const int h = static_cast<int>(lv.dim(1)), w = static_cast<int>(lv.dim(2));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  double s = 0.0;
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const int xx = x0 + dx, yy = y0 + dy;
      if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
      const double wx = dx ? x - x0 : 1 - (x - x0), wy = dy ? y - y0 : 1 - (y - y0);
      s += wx * wy * lv(src, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
    }
  return s;
}

Tensor pyramid_level0_ref(const Tensor& u1, const Tensor& u2) {
  const std::size_t c = u1.dim(0), h = u1.dim(1), w = u1.dim(2);
  Tensor out({h * w, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t m = 0; m < h; ++m)
        for (std::size_t n = 0; n < w; ++n) {
          double s = 0.0;
          for (std::size_t d = 0; d < c; ++d) s += u1(d, i, j) * u2(d, m, n);
          out(i * w + j, m, n) = s;
        }
  return out;
}

Tensor lookup_ref(const CorrelationPyramid& pyr, const Tensor& flow) {
  const std::size_t h = pyr.height, w = pyr.width, win = pyr.window();
  const int r = static_cast<int>(pyr.radius);
  Tensor out({pyr.levels.size() * win * win, h, w});
  for (std::size_t lvl = 0; lvl < pyr.levels.size(); ++lvl)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const double div = std::pow(2.0, static_cast<double>(lvl));
            const double x = (static_cast<double>(j) + flow(0, i, j)) / div + dx;
            const double y = (static_cast<double>(i) + flow(1, i, j)) / div + dy;
            const std::size_t ch = lvl * win * win + static_cast<std::size_t>(dy + r) * win + static_cast<std::size_t>(dx + r);
            out(ch, i, j) = bilinear_ref(pyr.levels[lvl], i * w + j, x, y);
          }
  return out;
}

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Tensor cat(std::vector<const Tensor*> parts) {
  std::size_t c = 0;
  for (auto* p : parts) c += p->dim(0);
  Tensor out({c, parts[0]->dim(1), parts[0]->dim(2)});
  std::size_t at = 0;
  for (auto* p : parts)
    for (std::size_t ch = 0; ch < p->dim(0); ++ch, ++at)
      for (std::size_t y = 0; y < p->dim(1); ++y)
        for (std::size_t x = 0; x < p->dim(2); ++x) out(at, y, x) = (*p)(ch, y, x);
  return out;
}

/// Straight-line re-implementation of the update operator.
std::pair<Tensor, Tensor> update_ref(const ModelParams& p, const FlowContext& ctx, const Tensor& h, const Tensor& f) {
  const ModelConfig& c = p.config;
  const int pad = static_cast<int>(c.kernel / 2);
  const std::size_t H = h.dim(1), W = h.dim(2), N = H * W;
  Tensor corr = lookup_ref(ctx.pyr, f);
  for (double& v : corr.values()) v /= std::sqrt(static_cast<double>(c.feature_channels));
  const Tensor mw = p.tensor("motion.weight"), mb = p.tensor("motion.bias");
  Tensor xm = conv_ref(cat({&ctx.q, &f, &corr}), mw, &mb, pad, 1);
  for (double& v : xm.values()) v = v > 0 ? v : 0.0;

  Tensor gin;
  if (c.variant == Variant::gma) {
    const Tensor wq = p.tensor("attn.query.weight"), wk = p.tensor("attn.key.weight"), wv = p.tensor("attn.value.weight");
    const std::size_t ca = c.attention_channels, cq = c.context_channels, cx = c.motion_channels;
    auto proj = [&](const Tensor& wt, const Tensor& in, std::size_t rows, std::size_t cols, std::size_t n) {
      Tensor o({rows, n});
      for (std::size_t a = 0; a < rows; ++a)
        for (std::size_t m = 0; m < n; ++m) {
          double s = 0;
          for (std::size_t b = 0; b < cols; ++b) s += wt(a, b, 0, 0) * in[b * n + m];
          o(a, m) = s;
        }
      return o;
    };
    const Tensor qq = proj(wq, ctx.q, ca, cq, N), kk = proj(wk, ctx.q, ca, cq, N), vv = proj(wv, xm, cx, cx, N);
    Tensor xhat({cx, H, W});
    for (std::size_t n = 0; n < N; ++n) {
      std::vector<double> logits(N);
      double mx = -1e300;
      for (std::size_t m = 0; m < N; ++m) {
        double s = 0;
        for (std::size_t a = 0; a < ca; ++a) s += qq(a, n) * kk(a, m);
        logits[m] = s / std::sqrt(static_cast<double>(ca));
        mx = std::max(mx, logits[m]);
      }
      double z = 0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t ch = 0; ch < cx; ++ch) {
        double s = 0;
        for (std::size_t m = 0; m < N; ++m) s += logits[m] / z * vv(ch, m);
        xhat[ch * N + n] = s;
      }
    }
    gin = cat({&xhat, &xm, &ctx.q});
  } else {
    gin = cat({&xm, &ctx.q});
  }
  const Tensor hx = cat({&h, &gin});
  const Tensor zw = p.tensor("gru.update.weight"), zb = p.tensor("gru.update.bias");
  const Tensor rw = p.tensor("gru.reset.weight"), rb = p.tensor("gru.reset.bias");
  const Tensor cw = p.tensor("gru.candidate.weight"), cb = p.tensor("gru.candidate.bias");
  const Tensor za = conv_ref(hx, zw, &zb, pad, 1), ra = conv_ref(hx, rw, &rb, pad, 1);
  Tensor rh = h;
  for (std::size_t i = 0; i < rh.size(); ++i) rh[i] *= sig(ra[i]);
  const Tensor ca = conv_ref(cat({&rh, &gin}), cw, &cb, pad, 1);
  Tensor hn(h.shape());
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double z = sig(za[i]);
    hn[i] = (1 - z) * h[i] + z * std::tanh(ca[i]);
  }
  const Tensor fw = p.tensor("head.weight"), fb = p.tensor("head.bias");
  Tensor fn = f + conv_ref(hn, fw, &fb, pad, 1);
  return {hn, fn};
}

// ---------------------------------------------------------------------------
// Tiny instance: 32x32 images, 4x4 feature grid.

ModelConfig tiny_config(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.image_height = c.image_width = 32;
  c.feature_channels = 4;
  c.context_channels = 3;
  c.hidden_channels = 5;
  c.motion_channels = 4;
  c.attention_channels = 2;
  c.levels = 2;
  c.radius = 1;
  return c;
}

struct Instance {
  ModelParams p;
  FlowContext x;
  Tensor h, f;
};

Instance tiny_instance(Variant v, std::uint64_t seed) {
  Rng rng(seed);
  Instance in{ModelParams(tiny_config(v)), {}, {}, {}};
  randomize(in.p, rng, 0.3);
  const ModelConfig& c = in.p.config;
  const std::size_t H = c.feature_height(), W = c.feature_width();
  in.x.q = relu(random_tensor({c.context_channels, H, W}, rng));
  const Tensor u1 = random_tensor({c.feature_channels, H, W}, rng);
  const Tensor u2 = random_tensor({c.feature_channels, H, W}, rng);
  in.x.pyr = correlation_pyramid(u1, u2, c.levels, c.radius);
  in.h = random_tensor({c.hidden_channels, H, W}, rng, 0.5);
  in.f = random_tensor({2, H, W}, rng, 1.2);
  return in;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double dotv(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vec random_vec(std::size_t n, Rng& rng) {
  Vec v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(Encoder, ZeroImageZeroBiasGivesZero) {
  ModelConfig c = tiny_config(Variant::raft);
  ModelParams p = init_params(c);
  for (const ParamEntry& e : p.layout.entries())
    if (e.name.ends_with("bias")) std::fill_n(p.theta.begin() + static_cast<std::ptrdiff_t>(e.offset), e.size, 0.0);
  const Tensor u = encode(p, "fnet", Tensor({3, 32, 32}));
  EXPECT_EQ(u.shape(), (Shape{4, 4, 4}));
  for (double v : u.values()) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, DeterministicAndMatchesConvOracle) {
  ModelConfig c = tiny_config(Variant::raft);
  c.image_height = c.image_width = 16;
  c.levels = 1;
  const ModelParams p = init_params(c);
  Rng rng(3);
  Tensor img({3, 16, 16});
  for (double& v : img.values()) v = rng.uniform();
  const Tensor u = encode(p, "fnet", img);
  EXPECT_EQ(u, encode(p, "fnet", img));
  EXPECT_EQ(u.shape(), (Shape{4, 2, 2}));
  const Tensor w1 = p.tensor("fnet.conv1.weight"), b1 = p.tensor("fnet.conv1.bias");
  const Tensor w2 = p.tensor("fnet.conv2.weight"), b2 = p.tensor("fnet.conv2.bias");
  Tensor a = conv_ref(img, w1, &b1, 3, 4);
  for (double& v : a.values()) v = std::max(v, 0.0);
  EXPECT_LT(max_abs_diff(u, conv_ref(a, w2, &b2, 1, 2)), 1e-12);
  EXPECT_THROW(encode(p, "fnet", Tensor({3, 12, 16})), ShapeError);
}

TEST(Correlation, OneHotFeatures) {
  Tensor u({3, 4, 4});
  u(1, 2, 3) = 1.0;
  const CorrelationPyramid pyr = correlation_pyramid(u, u, 1, 0);
  for (std::size_t s = 0; s < 16; ++s)
    for (std::size_t m = 0; m < 4; ++m)
      for (std::size_t n = 0; n < 4; ++n)
        EXPECT_EQ(pyr.levels[0](s, m, n), (s == 2 * 4 + 3 && m == 2 && n == 3) ? 1.0 : 0.0);
}

TEST(Correlation, MatchesQuadrupleLoopAndPools) {
  Rng rng(4);
  const Tensor u1 = random_tensor({4, 8, 8}, rng), u2 = random_tensor({4, 8, 8}, rng);
  const CorrelationPyramid pyr = correlation_pyramid(u1, u2, 3, 2);
  const Tensor ref = pyramid_level0_ref(u1, u2);
  EXPECT_LT(max_abs_diff(pyr.levels[0], ref), 1e-10);
  ASSERT_EQ(pyr.levels.size(), 3u);
  EXPECT_EQ(pyr.levels[1].shape(), (Shape{64, 4, 4}));
  EXPECT_EQ(pyr.levels[2].shape(), (Shape{64, 2, 2}));
  for (std::size_t s = 0; s < 64; ++s)
    for (std::size_t m = 0; m < 4; ++m)
      for (std::size_t n = 0; n < 4; ++n) {
        const double mean = 0.25 * (ref(s, 2 * m, 2 * n) + ref(s, 2 * m + 1, 2 * n) + ref(s, 2 * m, 2 * n + 1) +
                                    ref(s, 2 * m + 1, 2 * n + 1));
        EXPECT_NEAR(pyr.levels[1](s, m, n), mean, 1e-10);
      }
  Tensor doubled = u2;
  doubled *= 2.0;
  const CorrelationPyramid pyr2 = correlation_pyramid(u1, doubled, 1, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(pyr2.levels[0][i], 2 * ref[i], 1e-10);
  // (ij) <-> (mn) symmetry
  const CorrelationPyramid swapped = correlation_pyramid(u2, u1, 1, 2);
  for (std::size_t a = 0; a < 64; ++a)
    for (std::size_t b = 0; b < 64; ++b)
      EXPECT_NEAR(pyr.levels[0](a, b / 8, b % 8), swapped.levels[0](b, a / 8, a % 8), 1e-10);
  EXPECT_THROW(correlation_pyramid(u1, random_tensor({4, 8, 4}, rng), 1, 1), ShapeError);
  EXPECT_THROW(correlation_pyramid(random_tensor({4, 6, 6}, rng), random_tensor({4, 6, 6}, rng), 3, 1), ShapeError);
}

TEST(Correlation, PyramidVjpMatchesFiniteDifferences) {
  Rng rng(5);
  const Tensor u1 = random_tensor({3, 4, 4}, rng), u2 = random_tensor({3, 4, 4}, rng);
  std::vector<Tensor> g{random_tensor({16, 4, 4}, rng), random_tensor({16, 2, 2}, rng)};
  auto [g1, g2] = correlation_pyramid_vjp(u1, u2, g);
  for (int probe = 0; probe < 20; ++probe) {
    const Tensor d1 = random_tensor(u1.shape(), rng), d2 = random_tensor(u2.shape(), rng);
    const double eps = 1e-6;
    auto f = [&](double t) {
      const CorrelationPyramid pyr = correlation_pyramid(u1 + t * d1, u2 + t * d2, 2, 1);
      return dotv(pyr.levels[0].values(), g[0].values()) + dotv(pyr.levels[1].values(), g[1].values());
    };
    const double fd = (f(eps) - f(-eps)) / (2 * eps);
    const double an = dotv(g1.values(), d1.values()) + dotv(g2.values(), d2.values());
    EXPECT_NEAR(fd, an, 1e-5 * std::max(1.0, std::abs(an)));
  }
}

TEST(Lookup, IdentityOneHotAtRadiusZero) {
  // C0[s, m] = 1 iff m == s: every pixel matches itself.
  const std::size_t h = 4, w = 4;
  CorrelationPyramid pyr{{Tensor({h * w, h, w})}, h, w, 0};
  for (std::size_t s = 0; s < h * w; ++s) pyr.levels[0](s, s / w, s % w) = 1.0;
  const Tensor out = correlation_lookup(pyr, Tensor({2, h, w}));
  EXPECT_EQ(out.shape(), (Shape{1, h, w}));
  for (double v : out.values()) EXPECT_EQ(v, 1.0);
}

TEST(Lookup, LatticeAndMidpoint) {
  Rng rng(6);
  const Tensor u1 = random_tensor({3, 4, 4}, rng), u2 = random_tensor({3, 4, 4}, rng);
  const CorrelationPyramid pyr = correlation_pyramid(u1, u2, 1, 0);
  Tensor flow({2, 4, 4});
  flow(0, 1, 1) = 2.0;  // pixel (1,1) looks at column 3
  flow(1, 1, 1) = 1.0;  // and row 2
  EXPECT_DOUBLE_EQ(correlation_lookup(pyr, flow)(0, 1, 1), pyr.levels[0](5, 2, 3));
  flow(0, 1, 1) = 1.5;
  EXPECT_NEAR(correlation_lookup(pyr, flow)(0, 1, 1), 0.5 * (pyr.levels[0](5, 2, 2) + pyr.levels[0](5, 2, 3)), 1e-15);
  flow(0, 1, 1) = 10.0;  // off the grid
  EXPECT_EQ(correlation_lookup(pyr, flow)(0, 1, 1), 0.0);
}

TEST(Lookup, MatchesOracleAndChannelOrder) {
  Rng rng(7);
  const Tensor u1 = random_tensor({4, 8, 8}, rng), u2 = random_tensor({4, 8, 8}, rng);
  const CorrelationPyramid pyr = correlation_pyramid(u1, u2, 2, 2);
  const Tensor flow = random_tensor({2, 8, 8}, rng, 2.0);
  const Tensor out = correlation_lookup(pyr, flow);
  EXPECT_EQ(out.shape(), (Shape{50, 8, 8}));
  EXPECT_LT(max_abs_diff(out, lookup_ref(pyr, flow)), 1e-12);
}

TEST(Lookup, VjpMatchesFiniteDifferences) {
  Rng rng(8);
  const Tensor u1 = random_tensor({3, 4, 4}, rng), u2 = random_tensor({3, 4, 4}, rng);
  CorrelationPyramid pyr = correlation_pyramid(u1, u2, 2, 1);
  const Tensor flow = random_tensor({2, 4, 4}, rng, 1.3);
  const Tensor g = random_tensor({pyr.channels(), 4, 4}, rng);
  Tensor gf({2, 4, 4});
  std::vector<Tensor> gl{Tensor(pyr.levels[0].shape()), Tensor(pyr.levels[1].shape())};
  correlation_lookup_vjp(pyr, flow, g, &gf, &gl);
  for (int probe = 0; probe < 20; ++probe) {
    const Tensor df = random_tensor(flow.shape(), rng);
    const Tensor d0 = random_tensor(pyr.levels[0].shape(), rng), d1 = random_tensor(pyr.levels[1].shape(), rng);
    const double eps = 1e-6;
    auto f = [&](double t) {
      CorrelationPyramid q = pyr;
      q.levels[0] += t * d0;
      q.levels[1] += t * d1;
      return dotv(correlation_lookup(q, flow + t * df).values(), g.values());
    };
    const double fd = (f(eps) - f(-eps)) / (2 * eps);
    const double an = dotv(gf.values(), df.values()) + dotv(gl[0].values(), d0.values()) + dotv(gl[1].values(), d1.values());
    EXPECT_NEAR(fd, an, 1e-5 * std::max(1.0, std::abs(an)));
  }
}

TEST(Update, ZeroParamsHalveHiddenAndKeepFlow) {
  for (Variant v : {Variant::raft, Variant::gma}) {
    Instance in = tiny_instance(v, 9);
    std::fill(in.p.theta.begin(), in.p.theta.end(), 0.0);
    const auto [hn, fn] = update_forward(in.p, in.x, in.h, in.f);
    for (std::size_t i = 0; i < hn.size(); ++i) EXPECT_DOUBLE_EQ(hn[i], in.h[i] / 2);
    EXPECT_EQ(fn, in.f);
  }
}

TEST(Update, MatchesScalarOracle) {
  for (Variant v : {Variant::raft, Variant::gma})
    for (std::uint64_t seed : {10, 11, 12}) {
      const Instance in = tiny_instance(v, seed);
      const auto [hn, fn] = update_forward(in.p, in.x, in.h, in.f);
      const auto [hr, fr] = update_ref(in.p, in.x, in.h, in.f);
      EXPECT_LT(max_abs_diff(hn, hr), 1e-10) << to_string(v);
      EXPECT_LT(max_abs_diff(fn, fr), 1e-10) << to_string(v);
    }
}

TEST(Update, GmaWithZeroValueReducesToRaft) {
  Instance g = tiny_instance(Variant::gma, 13);
  std::fill_n(g.p.ptr("attn.value.weight"), g.p.layout.at("attn.value.weight").size, 0.0);
  ModelParams r(tiny_config(Variant::raft));
  const ModelConfig& c = g.p.config;
  for (const ParamEntry& e : r.layout.entries()) {
    if (!e.name.starts_with("gru.") || !e.name.ends_with(".weight")) {
      r.set(e.name, g.p.tensor(e.name));
      continue;
    }
    // Drop the x^ input channels, which sit right after h.
    const Tensor wg = g.p.tensor(e.name);
    Tensor wr(e.shape);
    for (std::size_t o = 0; o < e.shape[0]; ++o)
      for (std::size_t i = 0; i < e.shape[1]; ++i) {
        const std::size_t src = i < c.hidden_channels ? i : i + c.motion_channels;
        for (std::size_t y = 0; y < e.shape[2]; ++y)
          for (std::size_t x = 0; x < e.shape[3]; ++x) wr(o, i, y, x) = wg(o, src, y, x);
      }
    r.set(e.name, wr);
  }
  const auto [hg, fg] = update_forward(g.p, g.x, g.h, g.f);
  const auto [hr, fr] = update_forward(r, g.x, g.h, g.f);
  EXPECT_LT(max_abs_diff(hg, hr), 1e-13);
  EXPECT_LT(max_abs_diff(fg, fr), 1e-13);
}

TEST(Update, UniformAttentionAveragesValues) {
  Instance g = tiny_instance(Variant::gma, 14);
  std::fill_n(g.p.ptr("attn.query.weight"), g.p.layout.at("attn.query.weight").size, 0.0);
  UpdateCache cache;
  update_forward(g.p, g.x, g.h, g.f, &cache);
  const double n = static_cast<double>(cache.attn.dim(0));
  for (double a : cache.attn.values()) EXPECT_NEAR(a, 1.0 / n, 1e-15);
  // The x^ channels of the GRU input equal the spatial mean of V at every position.
  const std::size_t plane = cache.attn.dim(0), hc = g.p.config.hidden_channels;
  for (std::size_t ch = 0; ch < g.p.config.motion_channels; ++ch) {
    double mean = 0;
    for (std::size_t m = 0; m < plane; ++m) mean += cache.value(ch, m) / n;
    for (std::size_t m = 0; m < plane; ++m) EXPECT_NEAR(cache.hx[(hc + ch) * plane + m], mean, 1e-13);
  }
}

TEST(Update, ReappliedFixedPointHasTinyResidual) {
  // With a zero flow head f' = f, so the fixed point lives in h alone.
  Instance in = tiny_instance(Variant::raft, 15);
  std::fill_n(in.p.ptr("head.weight"), in.p.layout.at("head.weight").size, 0.0);
  std::fill_n(in.p.ptr("head.bias"), 2, 0.0);
  for (double& v : in.p.theta) v *= 0.2;
  const StateLayout layout = state_layout(in.p.config);
  SolverConfig cfg;
  cfg.max_iters = 200;
  cfg.rel_tol = 1e-14;
  const SolveResult sol = solve([&](const Vec& z) { return apply_update(in.p, in.x, z); }, Vec(layout.size(), 0.0), cfg);
  ASSERT_TRUE(sol.trace.converged);
  const Vec again = apply_update(in.p, in.x, sol.z_star);
  EXPECT_LE(l2_norm(again - sol.z_star), 1e-10);
}

TEST(Update, HiddenStateStaysBounded) {
  Instance in = tiny_instance(Variant::gma, 16);
  Rng big(99);
  randomize(in.p, big, 1.5);
  Tensor h = in.h, f = in.f;
  double h0 = 0;
  for (double v : h.values()) h0 = std::max(h0, std::abs(v));
  const double bound = std::max(h0, 1.0);
  for (int it = 0; it < 30; ++it) {
    auto [hn, fn] = update_forward(in.p, in.x, h, f);
    for (double v : hn.values()) ASSERT_LE(std::abs(v), bound + 1e-12);
    h = std::move(hn);
    f = std::move(fn);
  }
}

TEST(Update, VjpZeroAndLinear) {
  const Instance in = tiny_instance(Variant::gma, 17);
  UpdateCache cc;
  update_forward(in.p, in.x, in.h, in.f, &cc);
  Rng rng(18);
  auto run = [&](const Tensor& gh, const Tensor& gf) {
    Tensor oh(in.h.shape()), of(in.f.shape()), oq(in.x.q.shape());
    Vec th(in.p.theta.size(), 0.0);
    std::vector<Tensor> lv;
    for (const Tensor& t : in.x.pyr.levels) lv.emplace_back(t.shape());
    update_vjp(in.p, in.x, cc, gh, gf, {&oh, &of, &th, &oq, &lv});
    Vec all = oh.values();
    for (const Tensor* t : {&of, &oq}) all.insert(all.end(), t->values().begin(), t->values().end());
    all.insert(all.end(), th.begin(), th.end());
    for (const Tensor& t : lv) all.insert(all.end(), t.values().begin(), t.values().end());
    return all;
  };
  for (double v : run(Tensor(in.h.shape()), Tensor(in.f.shape()))) EXPECT_EQ(v, 0.0);
  const Tensor a1 = random_tensor(in.h.shape(), rng), b1 = random_tensor(in.f.shape(), rng);
  const Tensor a2 = random_tensor(in.h.shape(), rng), b2 = random_tensor(in.f.shape(), rng);
  const Vec lhs = run(0.7 * a1 + (-1.3) * a2, 0.7 * b1 + (-1.3) * b2);
  const Vec rhs = 0.7 * run(a1, b1) + (-1.3) * run(a2, b2);
  for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-10);
}

TEST(Update, VjpMatchesFiniteDifferences) {
  for (Variant v : {Variant::raft, Variant::gma}) {
    const Instance in = tiny_instance(v, 19);
    Rng rng(20);
    UpdateCache cc;
    update_forward(in.p, in.x, in.h, in.f, &cc);
    const Tensor gh = random_tensor(in.h.shape(), rng), gf = random_tensor(in.f.shape(), rng);
    Tensor oh(in.h.shape()), of(in.f.shape()), oq(in.x.q.shape());
    Vec th(in.p.theta.size(), 0.0);
    std::vector<Tensor> lv;
    for (const Tensor& t : in.x.pyr.levels) lv.emplace_back(t.shape());
    update_vjp(in.p, in.x, cc, gh, gf, {&oh, &of, &th, &oq, &lv});

    double worst = 0;
    for (int probe = 0; probe < 24; ++probe) {
      const Tensor dh = random_tensor(in.h.shape(), rng), df = random_tensor(in.f.shape(), rng);
      const Tensor dq = random_tensor(in.x.q.shape(), rng);
      const Vec dth = random_vec(th.size(), rng);
      std::vector<Tensor> dl;
      for (const Tensor& t : in.x.pyr.levels) dl.push_back(random_tensor(t.shape(), rng));
      const double eps = 1e-6;
      auto f = [&](double t) {
        ModelParams p = in.p;
        for (std::size_t i = 0; i < th.size(); ++i) p.theta[i] += t * dth[i];
        FlowContext x = in.x;
        x.q += t * dq;
        for (std::size_t k = 0; k < dl.size(); ++k) x.pyr.levels[k] += t * dl[k];
        const auto [hn, fn] = update_forward(p, x, in.h + t * dh, in.f + t * df);
        return dotv(hn.values(), gh.values()) + dotv(fn.values(), gf.values());
      };
      const double fd = (f(eps) - f(-eps)) / (2 * eps);
      double an = dotv(oh.values(), dh.values()) + dotv(of.values(), df.values()) + dotv(oq.values(), dq.values()) +
                  dotv(th, dth);
      for (std::size_t k = 0; k < dl.size(); ++k) an += dotv(lv[k].values(), dl[k].values());
      worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(an), 1e-3));
    }
    EXPECT_LE(worst, 1e-5) << to_string(v);
  }
}

TEST(Model, BundleAgreesWithUpdateAndEncodersBackprop) {
  ModelConfig c = tiny_config(Variant::raft);
  c.head_init_scale = 1.0;
  ModelParams p = init_params(c);
  Rng rng(21);
  SynthOptions o;
  o.height = o.width = 32;
  o.max_disp = 2.0;
  const FlowSample s = synth_pair(rng, o);
  const PreparedPair pp = prepare_pair(p, s.p1, s.p2);
  const StateLayout layout = state_layout(c);
  const Vec z = random_vec(layout.size(), rng);
  const Vec v = random_vec(layout.size(), rng);
  const VjpBundle b = make_bundle(p, pp.x);
  EXPECT_EQ(b.map(z), apply_update(p, pp.x, z));
  const Vec bundle_grad = b.vjp_theta(z, v);
  ASSERT_EQ(bundle_grad.size(), bundle_param_size(p, pp.x));
  const Vec grad = context_backward(p, pp, bundle_grad);

  double worst = 0;
  for (int probe = 0; probe < 20; ++probe) {
    const Vec d = random_vec(p.theta.size(), rng);
    const double eps = 1e-6;
    auto f = [&](double t) {
      ModelParams q = p;
      for (std::size_t i = 0; i < d.size(); ++i) q.theta[i] += t * d[i];
      const PreparedPair qq = prepare_pair(q, s.p1, s.p2);
      return dotv(apply_update(q, qq.x, z), v);
    };
    const double fd = (f(eps) - f(-eps)) / (2 * eps);
    const double an = dotv(grad, d);
    worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(an), 1e-3));
  }
  EXPECT_LE(worst, 1e-5);

  const Vec lam = b.damping_field(z);
  ASSERT_EQ(lam.size(), layout.size());
  for (double l : lam) {
    EXPECT_GT(l, 0.0);
    EXPECT_LT(l, 1.0);
  }
}

TEST(Params, CheckpointRoundTrip) {
  ModelConfig c = tiny_config(Variant::gma);
  c.init_seed = 5;
  const ModelParams p = init_params(c);
  const auto dir = std::filesystem::temp_directory_path() / "deqflow_ckpt_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  save_checkpoint(dir, p);
  const ModelParams back = load_checkpoint(dir);
  EXPECT_EQ(back.config, c);
  EXPECT_EQ(back.theta, p.theta);
  std::filesystem::remove_all(dir);

  EXPECT_EQ(init_params(c).theta, p.theta);
  EXPECT_THROW((nlohmann::json{{"radius", 2}, {"colour", 1}}.get<ModelConfig>()), std::invalid_argument);
  ModelConfig bad = c;
  bad.image_height = 36;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Synth, StaticStream) {
  Rng rng(22);
  const auto seq = synth_sequence(rng, 4, SynthOptions{}, 0.0);
  ASSERT_EQ(seq.size(), 4u);
  for (const FlowSample& s : seq) {
    EXPECT_EQ(s.p1, seq[0].p1);
    EXPECT_EQ(s.p2, seq[0].p1);
    for (double v : s.f_gt.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Synth, PureTranslationIsConstantAndExact) {
  Rng rng(23);
  SynthOptions o;
  o.translation_only = true;
  o.max_disp = 6.0;
  for (int t = 0; t < 5; ++t) {
    const FlowSample s = synth_pair(rng, o);
    const double tx = s.f_gt(0, 0, 0), ty = s.f_gt(1, 0, 0);
    for (std::size_t i = 0; i < s.f_gt.size() / 2; ++i) {
      EXPECT_EQ(s.f_gt[i], tx);
      EXPECT_EQ(s.f_gt[s.f_gt.size() / 2 + i], ty);
    }
    EXPECT_LE(std::hypot(tx, ty), o.max_disp + 1e-12);
    for (std::size_t i = 0; i < 64; ++i) {
      EXPECT_NEAR(s.f_gt_feat[i], tx / 8, 1e-12);
      EXPECT_NEAR(s.f_gt_feat[64 + i], ty / 8, 1e-12);
    }
  }
  // Integer shift: p2(c + t) == p1(c) for pixels that stay in view.
  const Texture tex = random_texture(rng);
  AffineWarp m = centred_warp(o);
  m.tx = 3;
  m.ty = -2;
  const FlowSample s = make_sample(tex, centred_warp(o), m, o, 0);
  for (std::size_t y = 2; y < 64; ++y)
    for (std::size_t x = 0; x + 3 < 64; ++x)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(s.p2(c, y - 2, x + 3), s.p1(c, y, x), 1e-12);
}

TEST(Synth, AffineWarpIsExactAndClamped) {
  Rng rng(24);
  SynthOptions o;
  o.max_disp = 5.0;
  for (int t = 0; t < 10; ++t) {
    const FlowSample s = synth_pair(rng, o);
    EXPECT_LE(s.warp.max_displacement(64, 64), 5.0 + 1e-9);
    double mx = 0;
    for (std::size_t i = 0; i < 64 * 64; ++i) mx = std::max(mx, std::hypot(s.f_gt[i], s.f_gt[4096 + i]));
    EXPECT_LE(mx, 5.0 + 1e-9);
    for (double x : {0.0, 17.5, 63.0})
      for (double y : {3.0, 40.25}) {
        const auto d = s.warp.flow(x, y);
        const auto back = s.warp.inverse(x + d[0], y + d[1]);
        EXPECT_NEAR(back[0], x, 1e-10);
        EXPECT_NEAR(back[1], y, 1e-10);
      }
    // Feature-resolution truth is the block-centre value over the stride.
    const auto d = s.warp.flow(8 * 2 + 3.5, 8 * 5 + 3.5);
    EXPECT_NEAR(s.f_gt_feat(0, 5, 2), d[0] / 8, 1e-10);
    EXPECT_NEAR(s.f_gt_feat(1, 5, 2), d[1] / 8, 1e-10);
    for (double v : s.p1.values()) ASSERT_TRUE(v >= 0 && v <= 1);
  }
  EXPECT_THROW(synth_pair(rng, SynthOptions{64, 64, 8, 16.0, false, 0.05}), std::invalid_argument);
}

TEST(Synth, SequencesAreDeterministicAndCoherent) {
  SynthOptions o;
  o.max_disp = 4.0;
  Rng a(25), b(25);
  const auto s1 = synth_sequence(a, 6, o, 0.3), s2 = synth_sequence(b, 6, o, 0.3);
  for (std::size_t t = 0; t < 6; ++t) {
    EXPECT_EQ(s1[t].p1, s2[t].p1);
    EXPECT_EQ(s1[t].f_gt, s2[t].f_gt);
  }
  for (std::size_t t = 1; t < 6; ++t) EXPECT_EQ(s1[t].p1, s1[t - 1].p2);
}

TEST(Metrics, Examples) {
  Rng rng(26);
  const Tensor gt = random_tensor({2, 8, 8}, rng, 4.0);
  EXPECT_EQ(epe(gt, gt), 0.0);
  EXPECT_EQ(f1_all(gt, gt), 0.0);
  Tensor off = gt;
  for (std::size_t i = 0; i < 64; ++i) {
    off[i] += 3.0;
    off[64 + i] += 4.0;
  }
  EXPECT_NEAR(epe(off, gt), 5.0, 1e-12);

  const Tensor f = gt + random_tensor({2, 8, 8}, rng, 4.0);
  double s = 0;
  int bad = 0;
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      const double e = std::sqrt(std::pow(f(0, y, x) - gt(0, y, x), 2) + std::pow(f(1, y, x) - gt(1, y, x), 2));
      const double m = std::sqrt(gt(0, y, x) * gt(0, y, x) + gt(1, y, x) * gt(1, y, x));
      s += e;
      if (e > 3.0 && e > 0.05 * m) ++bad;
    }
  EXPECT_NEAR(epe(f, gt), s / 64, 1e-12);
  EXPECT_NEAR(f1_all(f, gt), 100.0 * bad / 64, 1e-12);
  EXPECT_THROW(epe(f, Tensor({2, 8, 4})), ShapeError);
}

TEST(Metrics, FlowResolutionConsistency) {
  Tensor c({2, 64, 64});
  for (std::size_t i = 0; i < 4096; ++i) {
    c[i] = 2.5;
    c[4096 + i] = -1.25;
  }
  const Tensor down = downsample_flow(c, 8);
  EXPECT_EQ(down.shape(), (Shape{2, 8, 8}));
  EXPECT_LT(max_abs_diff(upsample_flow(down, 8), c), 1e-12);
  // Affine fields are reproduced exactly away from the clamped border.
  AffineWarp w = centred_warp(SynthOptions{});
  w.m00 = 0.03;
  w.m11 = -0.02;
  w.m01 = 0.01;
  w.tx = 1.0;
  const Tensor f = flow_field(w, 64, 64);
  const Tensor up = upsample_flow(downsample_flow(f, 8), 8);
  for (std::size_t y = 4; y < 60; ++y)
    for (std::size_t x = 4; x < 60; ++x) {
      EXPECT_NEAR(up(0, y, x), f(0, y, x), 1e-12);
      EXPECT_NEAR(up(1, y, x), f(1, y, x), 1e-12);
    }
}
