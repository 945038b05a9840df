#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <new>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/rng.hpp"

namespace sscvae {

// Eigen's vectorized reductions split their scalar/SIMD work at a point that
// depends on the buffer address modulo the packet size, so the rounding of a
// sum can vary between otherwise identical runs. Pinning every tensor buffer
// to a 64-byte boundary makes results a function of shape alone.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t(kAlign));
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const { return false; }
};

// Dense row-major tensor. Batched image data is laid out NCHW; latent
// batches are (N, dim). Nothing fancy: shape + flat storage.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // (n, c, h, w) accessor for 4-d tensors.
  T& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Reinterpret the shape without touching data; element count must match.
  Tensor reshaped(std::vector<int> shape) const {
    if (checked_numel(shape) != numel())
      throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  void add_(const Tensor& other) {
    assert(other.numel() == numel());
    for (std::int64_t i = 0; i < numel(); ++i) data_[i] += other.data_[i];
  }

  void scale_(T a) {
    for (auto& x : data_) x *= a;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape_.size(); ++i)
      os << shape_[i] << (i + 1 < shape_.size() ? "," : "");
    os << ")";
    return os.str();
  }

  std::uint64_t byte_hash() const {
    return fnv1a64(data_.data(), data_.size() * sizeof(T));
  }

 private:
  static std::int64_t checked_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<T, AlignedAllocator<T>> data_;
};

// Stack two tensors along the leading (batch) dimension.
template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != b.ndim() || a.ndim() < 1)
    throw std::invalid_argument("concat_batch: rank mismatch " + a.shape_str() +
                                " / " + b.shape_str());
  for (int i = 1; i < a.ndim(); ++i)
    if (a.dim(i) != b.dim(i))
      throw std::invalid_argument("concat_batch: trailing dims differ " +
                                  a.shape_str() + " / " + b.shape_str());
  std::vector<int> shape = a.shape();
  shape[0] = a.dim(0) + b.dim(0);
  Tensor<T> out(shape);
  std::copy(a.data(), a.data() + a.numel(), out.data());
  std::copy(b.data(), b.data() + b.numel(), out.data() + a.numel());
  return out;
}

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<int>& shape,
                   const char* what) {
  if (t.shape() != shape) {
    std::ostringstream os;
    os << what << ": expected shape (";
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << shape[i] << (i + 1 < shape.size() ? "," : "");
    os << "), got " << t.shape_str();
    throw std::invalid_argument(os.str());
  }
}

}  // namespace sscvae
