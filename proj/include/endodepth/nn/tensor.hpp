#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "endodepth/errors.hpp"

namespace endodepth::nn {

/// Cache-line aligned allocator. Vectorized kernels peel loops by address, so a
/// fixed alignment keeps summation order, and results, identical across runs.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<float, AlignedAllocator<float>>;

/// Dense NCHW float tensor.
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  Buffer data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }

  float* sample(int i) { return data.data() + i * sample_size(); }
  const float* sample(int i) const { return data.data() + i * sample_size(); }
  float* channel(int i, int ch) { return sample(i) + ch * plane(); }
  const float* channel(int i, int ch) const { return sample(i) + ch * plane(); }

  float& at(int i, int ch, int y, int x) { return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
  float at(int i, int ch, int y, int x) const {
    return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
  }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

/// Concatenates along channels; both inputs share n, h, w.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Splits a channel-concatenated gradient back into its two parts.
void split_channels(const Tensor& g, int c_first, Tensor& first, Tensor& second);

/// Trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  std::vector<int> shape;
  Buffer value;
  Buffer grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s);
  std::size_t size() const { return value.size(); }
  void zero_grad();
};

}  // namespace endodepth::nn
