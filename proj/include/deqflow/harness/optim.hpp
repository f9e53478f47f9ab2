#pragma once

#include <cmath>
#include <stdexcept>

#include "deqflow/numerics/tensor.hpp"

namespace deqflow::harness {

/// Scales g in place so that ||g|| <= max_norm; returns the norm before clipping.
/// max_norm = 0 disables clipping.
inline double clip_grad_norm(Vec& g, double max_norm) {
  const double n = l2_norm(g);
  if (max_norm > 0 && n > max_norm) {
    const double s = max_norm / n;
    for (double& v : g) v *= s;
  }
  return n;
}

/// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::size_t dim, double lr, double beta1, double beta2, double eps, double weight_decay)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay), m_(dim, 0.0), v_(dim, 0.0) {}

  void step(Vec& theta, const Vec& g) {
    if (theta.size() != m_.size() || g.size() != m_.size()) throw ShapeError("AdamW: dimension mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1 - b1_) * g[i];
      v_[i] = b2_ * v_[i] + (1 - b2_) * g[i] * g[i];
      const double mh = m_[i] / c1, vh = v_[i] / c2;
      theta[i] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * theta[i]);
    }
  }

  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_, wd_;
  Vec m_, v_;
  long t_ = 0;
};

}  // namespace deqflow::harness
