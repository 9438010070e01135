#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "endodepth/nn/tensor.hpp"

namespace endodepth::nn {

// forward() caches what backward() needs and must precede it. apply() is the
// same computation without caching and is safe to call concurrently.

/// 2D convolution with stride 1 and "same" zero padding (odd kernels).
class Conv2d {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel);

  /// He-normal weights scaled by `gain`; bias set to `bias`.
  void init(std::mt19937_64& rng, float gain = 1.0f, float bias = 0.0f);

  Tensor forward(const Tensor& x);
  Tensor apply(const Tensor& x) const;
  Tensor backward(const Tensor& grad_out);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  void parameters(std::vector<Parameter*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  void im2col(const float* x, int h, int w, float* col) const;
  void col2im(const float* col, int h, int w, float* x) const;
  Tensor run(const Tensor& x, Buffer& col) const;

  int in_;
  int out_;
  int k_;
  Parameter weight_;  // [out, in * k * k]
  Parameter bias_;    // [out]
  Tensor input_;
  Buffer col_;
};

/// Per-sample group normalization with learned affine.
class GroupNorm {
 public:
  GroupNorm(std::string name, int channels, int groups, float eps = 1e-5f);
  Tensor forward(const Tensor& x);
  Tensor apply(const Tensor& x) const;
  Tensor backward(const Tensor& grad_out);
  void parameters(std::vector<Parameter*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  int groups() const { return groups_; }

 private:
  Tensor run(const Tensor& x, Tensor& normalized, Buffer& inv_std) const;

  int channels_;
  int groups_;
  float eps_;
  Parameter gamma_;
  Parameter beta_;
  Tensor normalized_;
  Buffer inv_std_;  // [n * groups]
};

class Relu {
 public:
  Tensor forward(const Tensor& x);
  static Tensor apply(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  Tensor output_;
};

/// 2x2 max pooling with stride 2.
class MaxPool2 {
 public:
  Tensor forward(const Tensor& x);
  static Tensor apply(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  static Tensor run(const Tensor& x, std::vector<std::uint32_t>* argmax);
  int in_h_ = 0;
  int in_w_ = 0;
  std::vector<std::uint32_t> argmax_;
};

/// Nearest-neighbour 2x upsampling.
Tensor upsample_nearest2(const Tensor& x);
Tensor upsample_nearest2_backward(const Tensor& grad_out);

/// SGD with classical momentum: v = m v + g; p -= lr v.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Parameter*> params, float momentum);
  void step(float lr);
  void zero_grad();
  std::vector<Buffer>& velocity() { return velocity_; }
  const std::vector<Buffer>& velocity() const { return velocity_; }

 private:
  std::vector<Parameter*> params_;
  float momentum_;
  std::vector<Buffer> velocity_;
};

}  // namespace endodepth::nn
