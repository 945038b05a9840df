#pragma once

#include <Eigen/Dense>

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sscvae/core/tensor.hpp"

namespace sscvae::nn {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  // Inputs feeding each output unit; 0 means "initialize to zero" (biases).
  int fan_in = 0;

  Parameter(std::string n, std::vector<int> shape, int fan = 0)
      : name(std::move(n)), value(shape), grad(shape), fan_in(fan) {}

  void zero_grad() { grad.fill(T(0)); }
};

// A network is a DAG of layers with hand-written backward passes. forward()
// caches whatever backward() needs when `train` is set; a forward/backward
// cycle must complete before the layer is reused.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  // `train`: cache intermediates for a following backward().
  virtual Tensor<T> forward(const Tensor<T>& x, bool train) = 0;
  // `param_grads`: accumulate parameter gradients (callers zero them).
  // Always returns the gradient w.r.t. the layer input.
  virtual Tensor<T> backward(const Tensor<T>& dy, bool param_grads) = 0;
  virtual void collect_params(std::vector<Parameter<T>*>& out) {}
};

namespace detail {

inline int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Unpack one sample (C,H,W) into a (C*k*k) x (Ho*Wo) column-major matrix.
template <typename T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad,
            MatCM<T>& cols) {
  const int ho = conv_out_size(h, k, stride, pad);
  const int wo = conv_out_size(w, k, stride, pad);
  cols.resize(c * k * k, ho * wo);
  for (int oh = 0; oh < ho; ++oh) {
    for (int ow = 0; ow < wo; ++ow) {
      T* col = cols.data() + static_cast<std::int64_t>(oh * wo + ow) * (c * k * k);
      const int ih0 = oh * stride - pad;
      const int iw0 = ow * stride - pad;
      for (int ci = 0; ci < c; ++ci) {
        const T* plane = x + static_cast<std::int64_t>(ci) * h * w;
        for (int kh = 0; kh < k; ++kh) {
          const int ih = ih0 + kh;
          if (ih < 0 || ih >= h) {
            for (int kw = 0; kw < k; ++kw) *col++ = T(0);
            continue;
          }
          const T* row = plane + static_cast<std::int64_t>(ih) * w;
          for (int kw = 0; kw < k; ++kw) {
            const int iw = iw0 + kw;
            *col++ = (iw < 0 || iw >= w) ? T(0) : row[iw];
          }
        }
      }
    }
  }
}

// Scatter-add of im2col columns back into a (C,H,W) sample.
template <typename T>
void col2im(const MatCM<T>& cols, int c, int h, int w, int k, int stride,
            int pad, T* x) {
  const int ho = conv_out_size(h, k, stride, pad);
  const int wo = conv_out_size(w, k, stride, pad);
  std::fill(x, x + static_cast<std::int64_t>(c) * h * w, T(0));
  for (int oh = 0; oh < ho; ++oh) {
    for (int ow = 0; ow < wo; ++ow) {
      const T* col = cols.data() + static_cast<std::int64_t>(oh * wo + ow) * (c * k * k);
      const int ih0 = oh * stride - pad;
      const int iw0 = ow * stride - pad;
      for (int ci = 0; ci < c; ++ci) {
        T* plane = x + static_cast<std::int64_t>(ci) * h * w;
        for (int kh = 0; kh < k; ++kh) {
          const int ih = ih0 + kh;
          if (ih < 0 || ih >= h) {
            col += k;
            continue;
          }
          T* row = plane + static_cast<std::int64_t>(ih) * w;
          for (int kw = 0; kw < k; ++kw) {
            const int iw = iw0 + kw;
            if (iw >= 0 && iw < w) row[iw] += col[kw];
          }
          col += k;
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::string name, int in_ch, int out_ch, int k, int stride, int pad)
      : weight_(name + ".weight", {out_ch, in_ch, k, k}, in_ch * k * k),
        bias_(name + ".bias", {out_ch}),
        in_ch_(in_ch), out_ch_(out_ch), k_(k), stride_(stride), pad_(pad) {}

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    check_input(x);
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int ho = detail::conv_out_size(h, k_, stride_, pad_);
    const int wo = detail::conv_out_size(w, k_, stride_, pad_);
    Tensor<T> y({n, out_ch_, ho, wo});
    Eigen::Map<const MatRM<T>> wm(weight_.value.data(), out_ch_, in_ch_ * k_ * k_);
    for (int i = 0; i < n; ++i) {
      detail::im2col(x.data() + sample_offset(x, i), in_ch_, h, w, k_, stride_, pad_, cols_);
      Eigen::Map<MatRM<T>> ym(y.data() + sample_offset(y, i), out_ch_, ho * wo);
      ym.noalias() = wm * cols_;
      for (int c = 0; c < out_ch_; ++c) ym.row(c).array() += bias_.value[c];
    }
    if (train) x_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool param_grads) override {
    const int n = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
    const int ho = dy.dim(2), wo = dy.dim(3);
    Tensor<T> dx(x_.shape());
    Eigen::Map<const MatRM<T>> wm(weight_.value.data(), out_ch_, in_ch_ * k_ * k_);
    Eigen::Map<MatRM<T>> dwm(weight_.grad.data(), out_ch_, in_ch_ * k_ * k_);
    for (int i = 0; i < n; ++i) {
      Eigen::Map<const MatRM<T>> dym(dy.data() + sample_offset(dy, i), out_ch_, ho * wo);
      if (param_grads) {
        detail::im2col(x_.data() + sample_offset(x_, i), in_ch_, h, w, k_, stride_, pad_, cols_);
        dwm.noalias() += dym * cols_.transpose();
        for (int c = 0; c < out_ch_; ++c) bias_.grad[c] += dym.row(c).sum();
      }
      dcols_.resize(in_ch_ * k_ * k_, ho * wo);
      dcols_.noalias() = wm.transpose() * dym;
      detail::col2im(dcols_, in_ch_, h, w, k_, stride_, pad_, dx.data() + sample_offset(dx, i));
    }
    return dx;
  }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != in_ch_)
      throw std::invalid_argument("Conv2d: bad input shape " + x.shape_str());
  }
  static std::int64_t sample_offset(const Tensor<T>& t, int i) {
    return static_cast<std::int64_t>(i) * t.dim(1) * t.dim(2) * t.dim(3);
  }

  Parameter<T> weight_, bias_;
  int in_ch_, out_ch_, k_, stride_, pad_;
  Tensor<T> x_;
  MatCM<T> cols_, dcols_;
};

// Transposed convolution; the forward pass is the data-backward of Conv2d.
// Output size is (in-1)*stride - 2*pad + k + out_pad.
template <typename T>
class ConvTranspose2d final : public Layer<T> {
 public:
  ConvTranspose2d(std::string name, int in_ch, int out_ch, int k, int stride,
                  int pad, int out_pad)
      : weight_(name + ".weight", {in_ch, out_ch, k, k},
                std::max(1, in_ch * k * k / (stride * stride))),
        bias_(name + ".bias", {out_ch}),
        in_ch_(in_ch), out_ch_(out_ch), k_(k), stride_(stride), pad_(pad),
        out_pad_(out_pad) {}

  int out_size(int in) const { return (in - 1) * stride_ - 2 * pad_ + k_ + out_pad_; }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    if (x.ndim() != 4 || x.dim(1) != in_ch_)
      throw std::invalid_argument("ConvTranspose2d: bad input shape " + x.shape_str());
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int ho = out_size(h), wo = out_size(w);
    Tensor<T> y({n, out_ch_, ho, wo});
    Eigen::Map<const MatRM<T>> wm(weight_.value.data(), in_ch_, out_ch_ * k_ * k_);
    for (int i = 0; i < n; ++i) {
      Eigen::Map<const MatRM<T>> xm(x.data() + off(x, i), in_ch_, h * w);
      cols_.resize(out_ch_ * k_ * k_, h * w);
      cols_.noalias() = wm.transpose() * xm;
      T* ys = y.data() + off(y, i);
      detail::col2im(cols_, out_ch_, ho, wo, k_, stride_, pad_, ys);
      Eigen::Map<MatRM<T>> ym(ys, out_ch_, ho * wo);
      for (int c = 0; c < out_ch_; ++c) ym.row(c).array() += bias_.value[c];
    }
    if (train) x_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool param_grads) override {
    const int n = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
    const int ho = dy.dim(2), wo = dy.dim(3);
    Tensor<T> dx(x_.shape());
    Eigen::Map<const MatRM<T>> wm(weight_.value.data(), in_ch_, out_ch_ * k_ * k_);
    Eigen::Map<MatRM<T>> dwm(weight_.grad.data(), in_ch_, out_ch_ * k_ * k_);
    for (int i = 0; i < n; ++i) {
      detail::im2col(dy.data() + off(dy, i), out_ch_, ho, wo, k_, stride_, pad_, dcols_);
      Eigen::Map<MatRM<T>> dxm(dx.data() + off(dx, i), in_ch_, h * w);
      dxm.noalias() = wm * dcols_;
      if (param_grads) {
        Eigen::Map<const MatRM<T>> xm(x_.data() + off(x_, i), in_ch_, h * w);
        dwm.noalias() += xm * dcols_.transpose();
        Eigen::Map<const MatRM<T>> dym(dy.data() + off(dy, i), out_ch_, ho * wo);
        for (int c = 0; c < out_ch_; ++c) bias_.grad[c] += dym.row(c).sum();
      }
    }
    return dx;
  }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  static std::int64_t off(const Tensor<T>& t, int i) {
    return static_cast<std::int64_t>(i) * t.dim(1) * t.dim(2) * t.dim(3);
  }

  Parameter<T> weight_, bias_;
  int in_ch_, out_ch_, k_, stride_, pad_, out_pad_;
  Tensor<T> x_;
  MatCM<T> cols_, dcols_;
};

template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(std::string name, int in_dim, int out_dim)
      : weight_(name + ".weight", {out_dim, in_dim}, in_dim),
        bias_(name + ".bias", {out_dim}),
        in_dim_(in_dim), out_dim_(out_dim) {}

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    if (x.ndim() != 2 || x.dim(1) != in_dim_)
      throw std::invalid_argument("Linear: bad input shape " + x.shape_str());
    const int n = x.dim(0);
    Tensor<T> y({n, out_dim_});
    Eigen::Map<const MatRM<T>> xm(x.data(), n, in_dim_);
    Eigen::Map<const MatRM<T>> wm(weight_.value.data(), out_dim_, in_dim_);
    Eigen::Map<MatRM<T>> ym(y.data(), n, out_dim_);
    ym.noalias() = xm * wm.transpose();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < out_dim_; ++j) y[static_cast<std::int64_t>(i) * out_dim_ + j] += bias_.value[j];
    if (train) x_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool param_grads) override {
    const int n = x_.dim(0);
    Tensor<T> dx(x_.shape());
    Eigen::Map<const MatRM<T>> dym(dy.data(), n, out_dim_);
    Eigen::Map<const MatRM<T>> wm(weight_.value.data(), out_dim_, in_dim_);
    Eigen::Map<MatRM<T>> dxm(dx.data(), n, in_dim_);
    dxm.noalias() = dym * wm;
    if (param_grads) {
      Eigen::Map<const MatRM<T>> xm(x_.data(), n, in_dim_);
      Eigen::Map<MatRM<T>> dwm(weight_.grad.data(), out_dim_, in_dim_);
      dwm.noalias() += dym.transpose() * xm;
      for (int j = 0; j < out_dim_; ++j) bias_.grad[j] += dym.col(j).sum();
    }
    return dx;
  }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  Parameter<T> weight_, bias_;
  int in_dim_, out_dim_;
  Tensor<T> x_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> y = x;
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = y[i] > T(0) ? y[i] : T(0);
    if (train) x_ = x;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    Tensor<T> dx = dy;
    for (std::int64_t i = 0; i < dx.numel(); ++i)
      if (x_[i] <= T(0)) dx[i] = T(0);
    return dx;
  }

 private:
  Tensor<T> x_;
};

template <typename T>
class LeakyReLU final : public Layer<T> {
 public:
  explicit LeakyReLU(T slope) : slope_(slope) {}
  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> y = x;
    for (std::int64_t i = 0; i < y.numel(); ++i)
      if (y[i] < T(0)) y[i] *= slope_;
    if (train) x_ = x;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    Tensor<T> dx = dy;
    for (std::int64_t i = 0; i < dx.numel(); ++i)
      if (x_[i] < T(0)) dx[i] *= slope_;
    return dx;
  }

 private:
  T slope_;
  Tensor<T> x_;
};

template <typename T>
class Sigmoid final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> y = x;
    for (std::int64_t i = 0; i < y.numel(); ++i)
      y[i] = T(1) / (T(1) + std::exp(-y[i]));
    if (train) y_ = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    Tensor<T> dx = dy;
    for (std::int64_t i = 0; i < dx.numel(); ++i)
      dx[i] *= y_[i] * (T(1) - y_[i]);
    return dx;
  }

 private:
  Tensor<T> y_;
};

// (N, C, H, W) <-> (N, C*H*W).
template <typename T>
class Flatten final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool) override {
    in_shape_ = x.shape();
    return x.reshaped({x.dim(0), static_cast<int>(x.numel() / x.dim(0))});
  }
  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    return dy.reshaped(in_shape_);
  }

 private:
  std::vector<int> in_shape_;
};

// (N, D) -> (N, c, h, w) with D = c*h*w.
template <typename T>
class Unflatten final : public Layer<T> {
 public:
  Unflatten(int c, int h, int w) : c_(c), h_(h), w_(w) {}
  Tensor<T> forward(const Tensor<T>& x, bool) override {
    return x.reshaped({x.dim(0), c_, h_, w_});
  }
  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    return dy.reshaped({dy.dim(0), c_ * h_ * w_});
  }

 private:
  int c_, h_, w_;
};

}  // namespace sscvae::nn
