#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccm {

/// Cache-line aligned storage. Vectorized reductions peel differently
/// depending on the start address, so unaligned buffers make float results
/// vary from allocation to allocation.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

/// Dense float tensor in NCHW order.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, float fill = 0.0f)
      : n_(n), c_(c), h_(h), w_(w),
        data_(static_cast<std::size_t>(n) * c * h * w, fill) {
    if (n < 0 || c < 0 || h < 0 || w < 0) {
      throw std::invalid_argument("Tensor: negative dimension");
    }
  }

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(h_) * w_; }
  bool empty() const { return data_.empty(); }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }
  std::string shape_str() const {
    return "(" + std::to_string(n_) + "," + std::to_string(c_) + "," +
           std::to_string(h_) + "," + std::to_string(w_) + ")";
  }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  float* item(int b) { return data_.data() + static_cast<std::size_t>(b) * c_ * plane_size(); }
  const float* item(int b) const {
    return data_.data() + static_cast<std::size_t>(b) * c_ * plane_size();
  }
  float* plane(int b, int ch) { return item(b) + static_cast<std::size_t>(ch) * plane_size(); }
  const float* plane(int b, int ch) const {
    return item(b) + static_cast<std::size_t>(ch) * plane_size();
  }

  float& at(int b, int ch, int y, int x) {
    return plane(b, ch)[static_cast<std::size_t>(y) * w_ + x];
  }
  float at(int b, int ch, int y, int x) const {
    return plane(b, ch)[static_cast<std::size_t>(y) * w_ + x];
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  FloatBuffer data_;
};

}  // namespace ccm
