#pragma once

#include <cmath>
#include <vector>

#include "sscvae/nn/layers.hpp"

namespace sscvae::nn {

// Adaptive-moment optimizer over an explicit parameter list. State is kept
// per optimizer instance and is not serialized; each training stage creates
// a fresh one.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Parameter<T>*> params, T lr, T beta1 = T(0.9),
                T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void zero_grads() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, T(t_));
    const T bc2 = T(1) - std::pow(beta2_, T(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& value = params_[pi]->value;
      auto& grad = params_[pi]->grad;
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (std::int64_t i = 0; i < value.numel(); ++i) {
        const T g = grad[i];
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g;
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g * g;
        value[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

  const std::vector<Parameter<T>*>& params() const { return params_; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<Tensor<T>> m_, v_;
  T lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace sscvae::nn
