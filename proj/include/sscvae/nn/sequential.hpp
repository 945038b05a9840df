#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "sscvae/nn/layers.hpp"

namespace sscvae::nn {

template <typename T>
class Sequential final : public Layer<T> {
 public:
  Sequential() = default;
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  void push(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward(h, train);
    return h;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool param_grads) override {
    Tensor<T> g = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      g = (*it)->backward(g, param_grads);
    return g;
  }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    for (auto& l : layers_) l->collect_params(out);
  }

  std::vector<Parameter<T>*> params() {
    std::vector<Parameter<T>*> out;
    collect_params(out);
    return out;
  }

  void zero_grads() {
    for (auto* p : params()) p->zero_grad();
  }

  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// Residual down-sampling block: two 3x3 convolutions with a strided first
// conv and a 1x1 strided projection skip.
template <typename T>
class ResidualDown final : public Layer<T> {
 public:
  ResidualDown(const std::string& name, int in_ch, int out_ch, int stride = 2,
               bool leaky = false)
      : conv1_(name + ".conv1", in_ch, out_ch, 3, stride, 1),
        conv2_(name + ".conv2", out_ch, out_ch, 3, 1, 1),
        skip_(name + ".skip", in_ch, out_ch, 1, stride, 0),
        act1_(make_act(leaky)), act_out_(make_act(leaky)) {}

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> h = conv2_.forward(act1_->forward(conv1_.forward(x, train), train), train);
    h.add_(skip_.forward(x, train));
    return act_out_->forward(h, train);
  }

  Tensor<T> backward(const Tensor<T>& dy, bool param_grads) override {
    Tensor<T> dsum = act_out_->backward(dy, param_grads);
    Tensor<T> dx = skip_.backward(dsum, param_grads);
    dx.add_(conv1_.backward(
        act1_->backward(conv2_.backward(dsum, param_grads), param_grads),
        param_grads));
    return dx;
  }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    conv1_.collect_params(out);
    conv2_.collect_params(out);
    skip_.collect_params(out);
  }

 private:
  static std::unique_ptr<Layer<T>> make_act(bool leaky) {
    if (leaky) return std::make_unique<LeakyReLU<T>>(T(0.2));
    return std::make_unique<ReLU<T>>();
  }

  Conv2d<T> conv1_, conv2_, skip_;
  std::unique_ptr<Layer<T>> act1_, act_out_;
};

// Transposed residual block: doubles spatial resolution. Kernel sizes are
// multiples of the stride so every output pixel receives the same number of
// taps (no checkerboard imbalance).
template <typename T>
class ResidualUp final : public Layer<T> {
 public:
  ResidualUp(const std::string& name, int in_ch, int out_ch)
      : convt1_(name + ".convt1", in_ch, out_ch, 4, 2, 1, 0),
        conv2_(name + ".conv2", out_ch, out_ch, 3, 1, 1),
        skip_(name + ".skip", in_ch, out_ch, 2, 2, 0, 0) {}

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> h = conv2_.forward(act1_.forward(convt1_.forward(x, train), train), train);
    h.add_(skip_.forward(x, train));
    return act_out_.forward(h, train);
  }

  Tensor<T> backward(const Tensor<T>& dy, bool param_grads) override {
    Tensor<T> dsum = act_out_.backward(dy, param_grads);
    Tensor<T> dx = skip_.backward(dsum, param_grads);
    dx.add_(convt1_.backward(
        act1_.backward(conv2_.backward(dsum, param_grads), param_grads),
        param_grads));
    return dx;
  }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    convt1_.collect_params(out);
    conv2_.collect_params(out);
    skip_.collect_params(out);
  }

 private:
  ConvTranspose2d<T> convt1_;
  Conv2d<T> conv2_;
  ConvTranspose2d<T> skip_;
  ReLU<T> act1_, act_out_;
};

}  // namespace sscvae::nn
