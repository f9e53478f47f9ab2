#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>

#include "deqflow/numerics/tensor.hpp"

namespace deqflow {

/// Geometry of a 2-D cross-correlation with zero padding.
struct ConvGeometry {
  std::size_t c_in = 0, height = 0, width = 0;
  std::size_t c_out = 0, kh = 1, kw = 1;
  std::size_t padding = 0, stride = 1;

  std::size_t out_h() const { return (height + 2 * padding - kh) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * padding - kw) / stride + 1; }
  std::size_t patch() const { return c_in * kh * kw; }
  std::size_t kernel_size() const { return c_out * patch(); }
  std::size_t in_size() const { return c_in * height * width; }
  std::size_t out_size() const { return c_out * out_h() * out_w(); }
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

// col is [c_in*kh*kw, out_h*out_w]
inline void im2col(const double* in, const ConvGeometry& g, double* col) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const double* plane = in + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
        double* dst = col + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          double* drow = dst + oy * ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(drow, drow + ow, 0.0);
            continue;
          }
          const double* srow = plane + static_cast<std::size_t>(iy) * g.width;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                           ? 0.0
                           : srow[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* in_grad) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    double* plane = in_grad + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
        const double* src = col + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* drow = plane + static_cast<std::size_t>(iy) * g.width;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            drow[static_cast<std::size_t>(ix)] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// out = kernel (*) in + bias. `bias` may be null. `col` is scratch storage.
inline void conv2d_raw(const double* in, const double* kernel, const double* bias,
                       const ConvGeometry& g, double* out, Vec& col) {
  const std::size_t p = g.out_h() * g.out_w();
  col.resize(g.patch() * p);
  detail::im2col(in, g, col.data());
  detail::MapRow o(out, static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(p));
  detail::CMapRow k(kernel, static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(g.patch()));
  detail::CMapRow c(col.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(p));
  o.noalias() = k * c;
  if (bias)
    for (std::size_t co = 0; co < g.c_out; ++co)
      for (std::size_t i = 0; i < p; ++i) out[co * p + i] += bias[co];
}

/// Reverse mode of conv2d_raw. All gradient outputs accumulate and may be null.
/// `col` must hold im2col(in) if grad_kernel is requested; pass recompute=true to rebuild it.
inline void conv2d_raw_vjp(const double* in, const double* kernel, const ConvGeometry& g,
                           const double* grad_out, double* grad_in, double* grad_kernel,
                           double* grad_bias, Vec& col, bool recompute = true) {
  const std::size_t p = g.out_h() * g.out_w();
  const auto P = static_cast<Eigen::Index>(p);
  const auto K = static_cast<Eigen::Index>(g.patch());
  const auto CO = static_cast<Eigen::Index>(g.c_out);
  detail::CMapRow go(grad_out, CO, P);
  if (grad_kernel) {
    if (recompute) {
      col.resize(g.patch() * p);
      detail::im2col(in, g, col.data());
    }
    detail::MapRow gk(grad_kernel, CO, K);
    detail::CMapRow c(col.data(), K, P);
    gk.noalias() += go * c.transpose();
  }
  if (grad_bias)
    for (std::size_t co = 0; co < g.c_out; ++co) {
      double s = 0.0;
      for (std::size_t i = 0; i < p; ++i) s += grad_out[co * p + i];
      grad_bias[co] += s;
    }
  if (grad_in) {
    Vec gcol(g.patch() * p);
    detail::MapRow gc(gcol.data(), K, P);
    detail::CMapRow k(kernel, CO, K);
    gc.noalias() = k.transpose() * go;
    detail::col2im_add(gcol.data(), g, grad_in);
  }
}

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, std::size_t padding,
                                  std::size_t stride) {
  if (input.rank() != 3 || kernel.rank() != 4)
    throw ShapeError("conv2d expects input [C,H,W] and kernel [Co,Ci,kH,kW]");
  if (kernel.dim(1) != input.dim(0))
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                     " input channels, got " + std::to_string(input.dim(0)));
  if (kernel.dim(2) % 2 == 0 || kernel.dim(3) % 2 == 0)
    throw ShapeError("conv2d: kernel sizes must be odd");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernel.dim(0),
                 kernel.dim(2), kernel.dim(3), padding, stride};
  if (g.height + 2 * padding < g.kh || g.width + 2 * padding < g.kw)
    throw ShapeError("conv2d: kernel larger than padded input");
  return g;
}

/// Cross-correlation with zero padding: H' = (H + 2p - kH) / stride + 1.
/// `bias` may be an empty tensor.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     std::size_t padding, std::size_t stride = 1) {
  const ConvGeometry g = conv_geometry(input, kernel, padding, stride);
  if (!bias.empty() && bias.size() != g.c_out) throw ShapeError("conv2d: bias length mismatch");
  Tensor out({g.c_out, g.out_h(), g.out_w()});
  Vec col;
  conv2d_raw(input.data(), kernel.data(), bias.empty() ? nullptr : bias.data(), g, out.data(), col);
  return out;
}

struct Conv2dGrads {
  Tensor input, kernel, bias;
};

inline Conv2dGrads conv2d_vjp(const Tensor& input, const Tensor& kernel, std::size_t padding,
                              std::size_t stride, const Tensor& grad_out) {
  const ConvGeometry g = conv_geometry(input, kernel, padding, stride);
  if (grad_out.shape() != Shape{g.c_out, g.out_h(), g.out_w()})
    throw ShapeError("conv2d_vjp: cotangent shape mismatch");
  Conv2dGrads r{Tensor(input.shape()), Tensor(kernel.shape()), Tensor({g.c_out})};
  Vec col;
  conv2d_raw_vjp(input.data(), kernel.data(), g, grad_out.data(), r.input.data(), r.kernel.data(),
                 r.bias.data(), col);
  return r;
}

// ---------------------------------------------------------------------------
// Bilinear sampling with zero padding outside the grid.

/// Value of a single [h,w] plane at real coordinate (x = column, y = row).
/// Corners outside the plane contribute zero.
inline double bilinear_at(const double* plane, std::ptrdiff_t h, std::ptrdiff_t w, double x,
                          double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
  const double ax = x - fx, ay = y - fy;
  auto at = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) {
    return (xx < 0 || yy < 0 || xx >= w || yy >= h) ? 0.0 : plane[yy * w + xx];
  };
  return (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
         ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
}

/// Reverse mode of bilinear_at for cotangent `g`. Accumulates into plane_grad
/// (if non-null) and into *gx, *gy (the derivative uses the floor cell, i.e.
/// the right derivative at lattice points).
inline void bilinear_at_vjp(const double* plane, std::ptrdiff_t h, std::ptrdiff_t w, double x,
                            double y, double g, double* plane_grad, double* gx, double* gy) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
  const double ax = x - fx, ay = y - fy;
  auto inside = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) {
    return !(xx < 0 || yy < 0 || xx >= w || yy >= h);
  };
  auto at = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) {
    return inside(yy, xx) ? plane[yy * w + xx] : 0.0;
  };
  const double v00 = at(y0, x0), v01 = at(y0, x0 + 1), v10 = at(y0 + 1, x0),
               v11 = at(y0 + 1, x0 + 1);
  if (gx) *gx += g * ((1 - ay) * (v01 - v00) + ay * (v11 - v10));
  if (gy) *gy += g * ((1 - ax) * (v10 - v00) + ax * (v11 - v01));
  if (plane_grad) {
    auto add = [&](std::ptrdiff_t yy, std::ptrdiff_t xx, double wgt) {
      if (inside(yy, xx)) plane_grad[yy * w + xx] += g * wgt;
    };
    add(y0, x0, (1 - ay) * (1 - ax));
    add(y0, x0 + 1, (1 - ay) * ax);
    add(y0 + 1, x0, ay * (1 - ax));
    add(y0 + 1, x0 + 1, ay * ax);
  }
}

/// grid [C,H,W], coords [2,N] with row 0 = x (column) and row 1 = y (row).
/// Returns [C,N].
inline Tensor bilinear_sample(const Tensor& grid, const Tensor& coords) {
  if (grid.rank() != 3 || coords.rank() != 2 || coords.dim(0) != 2)
    throw ShapeError("bilinear_sample expects grid [C,H,W] and coords [2,N]");
  const std::size_t c = grid.dim(0), n = coords.dim(1);
  const auto h = static_cast<std::ptrdiff_t>(grid.dim(1)), w = static_cast<std::ptrdiff_t>(grid.dim(2));
  Tensor out({c, n});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = grid.data() + ch * grid.dim(1) * grid.dim(2);
    for (std::size_t i = 0; i < n; ++i) out(ch, i) = bilinear_at(plane, h, w, coords(0, i), coords(1, i));
  }
  return out;
}

struct BilinearGrads {
  Tensor grid, coords;
};

inline BilinearGrads bilinear_sample_vjp(const Tensor& grid, const Tensor& coords,
                                         const Tensor& grad_out) {
  if (grad_out.shape() != Shape{grid.dim(0), coords.dim(1)})
    throw ShapeError("bilinear_sample_vjp: cotangent shape mismatch");
  BilinearGrads r{Tensor(grid.shape()), Tensor(coords.shape())};
  const std::size_t c = grid.dim(0), n = coords.dim(1), plane = grid.dim(1) * grid.dim(2);
  const auto h = static_cast<std::ptrdiff_t>(grid.dim(1)), w = static_cast<std::ptrdiff_t>(grid.dim(2));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < n; ++i)
      bilinear_at_vjp(grid.data() + ch * plane, h, w, coords(0, i), coords(1, i), grad_out(ch, i),
                      r.grid.data() + ch * plane, &r.coords(0, i), &r.coords(1, i));
  return r;
}

// ---------------------------------------------------------------------------
// Pointwise helpers.

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace deqflow
