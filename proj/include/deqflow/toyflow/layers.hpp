#pragma once

#include <algorithm>
#include <cmath>

#include "deqflow/numerics/ops.hpp"
#include "deqflow/numerics/tensor.hpp"

namespace deqflow::toyflow {

/// Square-kernel convolution reading weights [c_out, C, k, k] straight out of theta.
inline Tensor conv(const Tensor& in, const double* weight, const double* bias, std::size_t c_out, std::size_t k,
                   std::size_t pad, std::size_t stride = 1) {
  const ConvGeometry g{in.dim(0), in.dim(1), in.dim(2), c_out, k, k, pad, stride};
  Tensor out({c_out, g.out_h(), g.out_w()});
  Vec col;
  conv2d_raw(in.data(), weight, bias, g, out.data(), col);
  return out;
}

/// Accumulates into whichever of grad_in / grad_w / grad_b is non-null.
inline void conv_vjp(const Tensor& in, const double* weight, std::size_t c_out, std::size_t k, std::size_t pad,
                     std::size_t stride, const Tensor& grad_out, Tensor* grad_in, double* grad_w, double* grad_b) {
  const ConvGeometry g{in.dim(0), in.dim(1), in.dim(2), c_out, k, k, pad, stride};
  Vec col;
  conv2d_raw_vjp(in.data(), weight, g, grad_out.data(), grad_in ? grad_in->data() : nullptr, grad_w, grad_b, col);
}

inline Tensor relu(Tensor t) {
  for (double& v : t.values()) v = std::max(v, 0.0);
  return t;
}

/// grad * 1[pre > 0]
inline Tensor relu_vjp(const Tensor& pre, Tensor grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(pre[i] > 0)) grad[i] = 0.0;
  return grad;
}

inline Tensor sigmoid(Tensor t) {
  for (double& v : t.values()) v = 1.0 / (1.0 + std::exp(-v));
  return t;
}

inline Tensor tanh(Tensor t) {
  for (double& v : t.values()) v = std::tanh(v);
  return t;
}

/// Adds channels [begin, begin + part.dim(0)) of `whole` into `part`.
inline void add_channels(const Tensor& whole, std::size_t begin, Tensor& part) {
  const std::size_t plane = whole.dim(1) * whole.dim(2);
  const double* src = whole.data() + begin * plane;
  for (std::size_t i = 0; i < part.size(); ++i) part[i] += src[i];
}

}  // namespace deqflow::toyflow
