#pragma once

#include <cmath>
#include <vector>

#include "swingup/common.hpp"
#include "swingup/tensor.hpp"

namespace swingup {

/// Scale gradients in place so their joint L2 norm is at most max_norm.
/// Returns the pre-clip norm.
inline double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) sq += g.flat().squaredNorm();
  double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: non-finite gradient norm");
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (Tensor& g : grads) g.flat() *= s;
  }
  return norm;
}

/// AdamW with decoupled weight decay.
class AdamW {
 public:
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  AdamW() = default;
  AdamW(double lr_, double wd) : lr(lr_), weight_decay(wd) {}

  void attach(const std::vector<Tensor*>& params) {
    m_.clear();
    v_.clear();
    t_ = 0;
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

  bool attached() const { return !m_.empty(); }
  std::int64_t steps() const { return t_; }

  /// One update. grads must align with the attach() order.
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw ContractError("adamw: parameter/gradient count mismatch");
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = grads[i];
      if (!p.same_shape(g)) throw ContractError("adamw: gradient shape mismatch");
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (std::int64_t k = 0; k < p.numel(); ++k) {
        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
        double mhat = m[k] / bc1;
        double vhat = v[k] / bc2;
        p[k] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[k]);
      }
    }
  }

  // Serialization hooks: moments and step count.
  std::vector<Tensor>& moments_m() { return m_; }
  std::vector<Tensor>& moments_v() { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace swingup
