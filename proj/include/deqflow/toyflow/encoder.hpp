#pragma once

#include <string>

#include "deqflow/toyflow/layers.hpp"
#include "deqflow/toyflow/params.hpp"

namespace deqflow::toyflow {

struct EncoderCache {
  Tensor input;
  Tensor pre1, act1;
  Tensor out;
};

/// Two strided convolutions with a ReLU between: [3,H,W] -> [C,H/8,W/8].
/// `net` is "fnet" (features) or "cnet" (context). The output is linear; the
/// context path applies its own ReLU.
inline Tensor encode(const ModelParams& p, const std::string& net, const Tensor& image, EncoderCache* cache = nullptr) {
  const ModelConfig& c = p.config;
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("encode: expected an image [3,H,W], got " + shape_str(image.shape()));
  if (image.dim(1) % ModelConfig::stride || image.dim(2) % ModelConfig::stride)
    throw ShapeError("encode: image size " + shape_str(image.shape()) + " not divisible by 8");
  const std::size_t out_c = net == "fnet" ? c.feature_channels : c.context_channels;
  Tensor pre1 = conv(image, p.ptr(net + ".conv1.weight"), p.ptr(net + ".conv1.bias"), ModelConfig::encoder_mid, 7, 3, 4);
  Tensor act1 = relu(pre1);
  Tensor out = conv(act1, p.ptr(net + ".conv2.weight"), p.ptr(net + ".conv2.bias"), out_c, 3, 1, 2);
  if (cache) *cache = {image, std::move(pre1), std::move(act1), out};
  return out;
}

/// Accumulates the encoder's parameter gradient for output cotangent `grad_out`.
inline void encode_vjp(const ModelParams& p, const std::string& net, const EncoderCache& cache, const Tensor& grad_out,
                       Vec& grad_theta) {
  const ModelConfig& c = p.config;
  const std::size_t out_c = net == "fnet" ? c.feature_channels : c.context_channels;
  const ParamLayout& l = p.layout;
  Tensor g_act1(cache.act1.shape());
  conv_vjp(cache.act1, p.ptr(net + ".conv2.weight"), out_c, 3, 1, 2, grad_out, &g_act1,
           grad_theta.data() + l.offset(net + ".conv2.weight"), grad_theta.data() + l.offset(net + ".conv2.bias"));
  const Tensor g_pre1 = relu_vjp(cache.pre1, std::move(g_act1));
  conv_vjp(cache.input, p.ptr(net + ".conv1.weight"), ModelConfig::encoder_mid, 7, 3, 4, g_pre1, nullptr,
           grad_theta.data() + l.offset(net + ".conv1.weight"), grad_theta.data() + l.offset(net + ".conv1.bias"));
}

}  // namespace deqflow::toyflow
