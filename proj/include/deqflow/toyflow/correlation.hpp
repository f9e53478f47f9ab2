#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <vector>

#include "deqflow/numerics/ops.hpp"
#include "deqflow/numerics/tensor.hpp"

namespace deqflow::toyflow {

/// All-pairs correlation of two feature maps [C,H,W]. Level k is stored as
/// [H*W, H/2^k, W/2^k]: one coarse target plane per source pixel.
struct CorrelationPyramid {
  std::vector<Tensor> levels;
  std::size_t height = 0, width = 0;
  std::size_t radius = 0;

  std::size_t window() const { return 2 * radius + 1; }
  std::size_t channels() const { return levels.size() * window() * window(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const Tensor& t : levels) n += t.size();
    return n;
  }
};

namespace detail {

using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// [N, h, w] -> [N, h/2, w/2] by 2x2 means.
inline Tensor avg_pool_last2(const Tensor& t) {
  const std::size_t n = t.dim(0), h = t.dim(1) / 2, w = t.dim(2) / 2;
  Tensor out({n, h, w});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out(s, y, x) = 0.25 * (t(s, 2 * y, 2 * x) + t(s, 2 * y, 2 * x + 1) + t(s, 2 * y + 1, 2 * x) +
                               t(s, 2 * y + 1, 2 * x + 1));
  return out;
}

inline void avg_pool_last2_vjp(const Tensor& grad_out, Tensor& grad_in) {
  const std::size_t n = grad_out.dim(0), h = grad_out.dim(1), w = grad_out.dim(2);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double g = 0.25 * grad_out(s, y, x);
        grad_in(s, 2 * y, 2 * x) += g;
        grad_in(s, 2 * y, 2 * x + 1) += g;
        grad_in(s, 2 * y + 1, 2 * x) += g;
        grad_in(s, 2 * y + 1, 2 * x + 1) += g;
      }
}

}  // namespace detail

/// C0[ij, mn] = sum_d u1[d,i,j] u2[d,m,n]; level k+1 is the 2x2 mean of level k
/// over the target axes.
inline CorrelationPyramid correlation_pyramid(const Tensor& u1, const Tensor& u2, std::size_t p_levels,
                                              std::size_t radius) {
  if (u1.rank() != 3 || u1.shape() != u2.shape())
    throw ShapeError("correlation_pyramid: feature maps must share shape [C,H,W]");
  if (p_levels == 0) throw std::invalid_argument("correlation_pyramid: need at least one level");
  const std::size_t c = u1.dim(0), h = u1.dim(1), w = u1.dim(2), n = h * w;
  const std::size_t div = std::size_t{1} << (p_levels - 1);
  if (h % div || w % div) throw ShapeError("correlation_pyramid: grid not divisible by 2^(levels-1)");
  using CMap = Eigen::Map<const detail::RowMatD>;
  const CMap a(u1.data(), static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n));
  const CMap b(u2.data(), static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n));
  CorrelationPyramid pyr{{}, h, w, radius};
  Tensor l0({n, h, w});
  Eigen::Map<detail::RowMatD>(l0.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)).noalias() =
      a.transpose() * b;
  pyr.levels.push_back(std::move(l0));
  for (std::size_t k = 1; k < p_levels; ++k) pyr.levels.push_back(detail::avg_pool_last2(pyr.levels.back()));
  return pyr;
}

/// Gradients of correlation_pyramid with respect to u1 and u2.
inline std::pair<Tensor, Tensor> correlation_pyramid_vjp(const Tensor& u1, const Tensor& u2,
                                                         const std::vector<Tensor>& level_grads) {
  const std::size_t c = u1.dim(0), n = u1.dim(1) * u1.dim(2);
  std::vector<Tensor> g(level_grads);
  for (std::size_t k = g.size(); k-- > 1;) detail::avg_pool_last2_vjp(g[k], g[k - 1]);
  using CMap = Eigen::Map<const detail::RowMatD>;
  using Map = Eigen::Map<detail::RowMatD>;
  const auto C = static_cast<Eigen::Index>(c), N = static_cast<Eigen::Index>(n);
  const CMap a(u1.data(), C, N), b(u2.data(), C, N), gc(g[0].data(), N, N);
  Tensor g1(u1.shape()), g2(u2.shape());
  Map(g1.data(), C, N).noalias() = b * gc.transpose();
  Map(g2.data(), C, N).noalias() = a * gc;
  return {std::move(g1), std::move(g2)};
}

/// Samples every level around (c0 + f) / 2^k with a (2r+1)^2 window.
/// Output channels run in (level, dy, dx) order; out-of-range taps read zero.
inline Tensor correlation_lookup(const CorrelationPyramid& pyr, const Tensor& flow) {
  const std::size_t h = pyr.height, w = pyr.width, win = pyr.window();
  if (flow.shape() != Shape{2, h, w}) throw ShapeError("correlation_lookup: flow must be [2,H,W]");
  const auto r = static_cast<double>(pyr.radius);
  Tensor out({pyr.channels(), h, w});
  for (std::size_t k = 0; k < pyr.levels.size(); ++k) {
    const Tensor& lv = pyr.levels[k];
    const auto lh = static_cast<std::ptrdiff_t>(lv.dim(1)), lw = static_cast<std::ptrdiff_t>(lv.dim(2));
    const double scale = 1.0 / static_cast<double>(std::size_t{1} << k);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double* plane = lv.data() + (i * w + j) * lv.dim(1) * lv.dim(2);
        const double cx = (static_cast<double>(j) + flow(0, i, j)) * scale;
        const double cy = (static_cast<double>(i) + flow(1, i, j)) * scale;
        for (std::size_t dy = 0; dy < win; ++dy)
          for (std::size_t dx = 0; dx < win; ++dx)
            out((k * win + dy) * win + dx, i, j) = bilinear_at(plane, lh, lw, cx + static_cast<double>(dx) - r,
                                                               cy + static_cast<double>(dy) - r);
      }
  }
  return out;
}

/// Accumulates into grad_flow [2,H,W] and grad_levels (shaped like pyr.levels);
/// either may be null.
inline void correlation_lookup_vjp(const CorrelationPyramid& pyr, const Tensor& flow, const Tensor& grad_out,
                                   Tensor* grad_flow, std::vector<Tensor>* grad_levels) {
  const std::size_t h = pyr.height, w = pyr.width, win = pyr.window();
  if (grad_out.shape() != Shape{pyr.channels(), h, w}) throw ShapeError("correlation_lookup_vjp: cotangent shape");
  const auto r = static_cast<double>(pyr.radius);
  for (std::size_t k = 0; k < pyr.levels.size(); ++k) {
    const Tensor& lv = pyr.levels[k];
    const std::size_t plane_size = lv.dim(1) * lv.dim(2);
    const auto lh = static_cast<std::ptrdiff_t>(lv.dim(1)), lw = static_cast<std::ptrdiff_t>(lv.dim(2));
    const double scale = 1.0 / static_cast<double>(std::size_t{1} << k);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t src = i * w + j;
        const double* plane = lv.data() + src * plane_size;
        double* plane_grad = grad_levels ? (*grad_levels)[k].data() + src * plane_size : nullptr;
        const double cx = (static_cast<double>(j) + flow(0, i, j)) * scale;
        const double cy = (static_cast<double>(i) + flow(1, i, j)) * scale;
        double gx = 0.0, gy = 0.0;
        for (std::size_t dy = 0; dy < win; ++dy)
          for (std::size_t dx = 0; dx < win; ++dx) {
            const double g = grad_out((k * win + dy) * win + dx, i, j);
            if (g == 0.0) continue;
            bilinear_at_vjp(plane, lh, lw, cx + static_cast<double>(dx) - r, cy + static_cast<double>(dy) - r, g,
                            plane_grad, &gx, &gy);
          }
        if (grad_flow) {
          (*grad_flow)(0, i, j) += gx * scale;
          (*grad_flow)(1, i, j) += gy * scale;
        }
      }
  }
}

}  // namespace deqflow::toyflow
