#pragma once

#include <algorithm>
#include <cmath>

#include "deqflow/numerics/tensor.hpp"

namespace deqflow::toyflow {

inline void require_flow_pair(const Tensor& f, const Tensor& gt, const char* who) {
  if (f.rank() != 3 || f.dim(0) != 2 || f.shape() != gt.shape())
    throw ShapeError(std::string(who) + ": flows must share shape [2,H,W]");
}

/// Mean per-pixel Euclidean error.
inline double epe(const Tensor& f, const Tensor& gt) {
  require_flow_pair(f, gt, "epe");
  const std::size_t n = f.dim(1) * f.dim(2);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::hypot(f[i] - gt[i], f[n + i] - gt[n + i]);
  return s / static_cast<double>(n);
}

/// Percentage of pixels whose error exceeds abs_thresh and rel_thresh * |gt|.
inline double f1_all(const Tensor& f, const Tensor& gt, double abs_thresh = 3.0, double rel_thresh = 0.05) {
  require_flow_pair(f, gt, "f1_all");
  const std::size_t n = f.dim(1) * f.dim(2);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double err = std::hypot(f[i] - gt[i], f[n + i] - gt[n + i]);
    const double mag = std::hypot(gt[i], gt[n + i]);
    if (err > abs_thresh && err > rel_thresh * mag) ++bad;
  }
  return 100.0 * static_cast<double>(bad) / static_cast<double>(n);
}

/// Mean of ||f|| over pixels.
inline double mean_magnitude(const Tensor& f) {
  const std::size_t n = f.dim(1) * f.dim(2);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::hypot(f[i], f[n + i]);
  return s / static_cast<double>(n);
}

/// Image-resolution flow [2,H,W] -> feature grid [2,H/s,W/s]: block mean,
/// divided by s so the result is in feature pixels.
inline Tensor downsample_flow(const Tensor& f, std::size_t s) {
  if (f.rank() != 3 || f.dim(0) != 2 || f.dim(1) % s || f.dim(2) % s)
    throw ShapeError("downsample_flow: [2,H,W] with H, W divisible by the stride");
  const std::size_t h = f.dim(1) / s, w = f.dim(2) / s;
  Tensor out({2, h, w});
  const double norm = 1.0 / static_cast<double>(s * s * s);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < f.dim(1); ++y)
      for (std::size_t x = 0; x < f.dim(2); ++x) out(c, y / s, x / s) += f(c, y, x) * norm;
  return out;
}

/// Feature-grid flow -> image resolution: bilinear interpolation with edge
/// clamping, feature cell Y centred at image row s*Y + (s-1)/2, values times s.
inline Tensor upsample_flow(const Tensor& f, std::size_t s) {
  if (f.rank() != 3 || f.dim(0) != 2) throw ShapeError("upsample_flow: expected [2,h,w]");
  const std::size_t h = f.dim(1), w = f.dim(2);
  Tensor out({2, h * s, w * s});
  const double off = (static_cast<double>(s) - 1.0) / 2.0;
  auto axis = [&](std::size_t i, std::size_t n, std::size_t& lo, std::size_t& hi, double& a) {
    const double u = std::clamp((static_cast<double>(i) - off) / static_cast<double>(s), 0.0,
                                static_cast<double>(n - 1));
    lo = static_cast<std::size_t>(std::floor(u));
    hi = std::min(lo + 1, n - 1);
    a = u - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < h * s; ++y) {
    std::size_t y0, y1;
    double ay;
    axis(y, h, y0, y1, ay);
    for (std::size_t x = 0; x < w * s; ++x) {
      std::size_t x0, x1;
      double ax;
      axis(x, w, x0, x1, ax);
      for (std::size_t c = 0; c < 2; ++c) {
        const double v = (1 - ay) * ((1 - ax) * f(c, y0, x0) + ax * f(c, y0, x1)) +
                         ay * ((1 - ax) * f(c, y1, x0) + ax * f(c, y1, x1));
        out(c, y, x) = v * static_cast<double>(s);
      }
    }
  }
  return out;
}

}  // namespace deqflow::toyflow
