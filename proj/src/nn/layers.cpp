#include "endodepth/nn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace endodepth::nn {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w) throw InputError("concat_channels: shape mismatch");
  Tensor out(a.n, a.c + b.c, a.h, a.w);
  for (int i = 0; i < a.n; ++i) {
    std::copy_n(a.sample(i), a.sample_size(), out.sample(i));
    std::copy_n(b.sample(i), b.sample_size(), out.sample(i) + a.sample_size());
  }
  return out;
}

void split_channels(const Tensor& g, int c_first, Tensor& first, Tensor& second) {
  first = Tensor(g.n, c_first, g.h, g.w);
  second = Tensor(g.n, g.c - c_first, g.h, g.w);
  for (int i = 0; i < g.n; ++i) {
    std::copy_n(g.sample(i), first.sample_size(), first.sample(i));
    std::copy_n(g.sample(i) + first.sample_size(), second.sample_size(), second.sample(i));
  }
}

Parameter::Parameter(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
  std::size_t count = 1;
  for (int d : shape) count *= static_cast<std::size_t>(d);
  value.assign(count, 0.0f);
  grad.assign(count, 0.0f);
}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }

// ---------------------------------------------------------------------------

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      weight_(name + ".weight", {out_channels, in_channels, kernel, kernel}),
      bias_(name + ".bias", {out_channels}) {
  if (kernel % 2 != 1) throw InputError("Conv2d: kernel size must be odd");
}

void Conv2d::init(std::mt19937_64& rng, float gain, float bias) {
  const float fan_in = static_cast<float>(in_ * k_ * k_);
  std::normal_distribution<float> dist(0.0f, gain * std::sqrt(2.0f / fan_in));
  for (float& w : weight_.value) w = dist(rng);
  std::fill(bias_.value.begin(), bias_.value.end(), bias);
}

void Conv2d::im2col(const float* x, int h, int w, float* col) const {
  const int pad = k_ / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < in_; ++ci) {
    const float* src = x + ci * hw;
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        float* dst = col + ((static_cast<std::size_t>(ci) * k_ + ky) * k_ + kx) * hw;
        const int dy = ky - pad;
        const int dx = kx - pad;
        const int x_lo = std::max(0, -dx);
        const int x_hi = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          float* row = dst + static_cast<std::size_t>(y) * w;
          const int sy = y + dy;
          if (sy < 0 || sy >= h) {
            std::fill_n(row, w, 0.0f);
            continue;
          }
          std::fill(row, row + x_lo, 0.0f);
          std::copy(src + sy * w + x_lo + dx, src + sy * w + x_hi + dx, row + x_lo);
          std::fill(row + x_hi, row + w, 0.0f);
        }
      }
    }
  }
}

void Conv2d::col2im(const float* col, int h, int w, float* x) const {
  const int pad = k_ / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < in_; ++ci) {
    float* dst = x + ci * hw;
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        const float* src = col + ((static_cast<std::size_t>(ci) * k_ + ky) * k_ + kx) * hw;
        const int dy = ky - pad;
        const int dx = kx - pad;
        const int x_lo = std::max(0, -dx);
        const int x_hi = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const float* row = src + static_cast<std::size_t>(y) * w;
          float* out = dst + sy * w + dx;
          for (int xx = x_lo; xx < x_hi; ++xx) out[xx] += row[xx];
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x) {
  input_ = x;
  return run(x, col_);
}

Tensor Conv2d::apply(const Tensor& x) const {
  Buffer col;
  return run(x, col);
}

Tensor Conv2d::run(const Tensor& x, Buffer& col) const {
  if (x.c != in_) throw InputError("Conv2d: expected " + std::to_string(in_) + " input channels");
  const int hw = x.h * x.w;
  const int kk = in_ * k_ * k_;
  Tensor y(x.n, out_, x.h, x.w);
  Eigen::Map<const MatR> wm(weight_.value.data(), out_, kk);
  if (k_ > 1) col.resize(static_cast<std::size_t>(kk) * hw);
  for (int i = 0; i < x.n; ++i) {
    const float* colp = x.sample(i);
    if (k_ > 1) {
      im2col(x.sample(i), x.h, x.w, col.data());
      colp = col.data();
    }
    Eigen::Map<const MatR> cm(colp, kk, hw);
    Eigen::Map<MatR> ym(y.sample(i), out_, hw);
    ym.noalias() = wm * cm;
    for (int o = 0; o < out_; ++o) ym.row(o).array() += bias_.value[o];
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const Tensor& x = input_;
  const int hw = x.h * x.w;
  const int kk = in_ * k_ * k_;
  Tensor dx(x.n, in_, x.h, x.w);
  Eigen::Map<const MatR> wm(weight_.value.data(), out_, kk);
  Eigen::Map<MatR> dw(weight_.grad.data(), out_, kk);
  Buffer dcol(k_ > 1 ? static_cast<std::size_t>(kk) * hw : 0);
  for (int i = 0; i < x.n; ++i) {
    Eigen::Map<const MatR> gm(grad_out.sample(i), out_, hw);
    const float* colp = x.sample(i);
    if (k_ > 1) {
      im2col(x.sample(i), x.h, x.w, col_.data());
      colp = col_.data();
    }
    Eigen::Map<const MatR> cm(colp, kk, hw);
    dw.noalias() += gm * cm.transpose();
    for (int o = 0; o < out_; ++o) bias_.grad[o] += gm.row(o).sum();
    if (k_ > 1) {
      Eigen::Map<MatR> dc(dcol.data(), kk, hw);
      dc.noalias() = wm.transpose() * gm;
      col2im(dcol.data(), x.h, x.w, dx.sample(i));
    } else {
      Eigen::Map<MatR> dxm(dx.sample(i), kk, hw);
      dxm.noalias() = wm.transpose() * gm;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

GroupNorm::GroupNorm(std::string name, int channels, int groups, float eps)
    : channels_(channels),
      groups_(groups),
      eps_(eps),
      gamma_(name + ".gamma", {channels}),
      beta_(name + ".beta", {channels}) {
  if (groups < 1 || channels % groups != 0) {
    throw InputError("GroupNorm: channels must be divisible by groups");
  }
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
}

Tensor GroupNorm::forward(const Tensor& x) { return run(x, normalized_, inv_std_); }

Tensor GroupNorm::apply(const Tensor& x) const {
  Tensor normalized;
  Buffer inv_std;
  return run(x, normalized, inv_std);
}

Tensor GroupNorm::run(const Tensor& x, Tensor& normalized, Buffer& inv_std) const {
  if (x.c != channels_) throw InputError("GroupNorm: channel mismatch");
  const int cpg = channels_ / groups_;
  const std::size_t group_size = cpg * x.plane();
  normalized = Tensor(x.n, x.c, x.h, x.w);
  inv_std.assign(static_cast<std::size_t>(x.n) * groups_, 0.0f);
  Tensor y(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    for (int g = 0; g < groups_; ++g) {
      const float* src = x.channel(i, g * cpg);
      double sum = 0.0, sq = 0.0;
      for (std::size_t t = 0; t < group_size; ++t) {
        sum += src[t];
        sq += static_cast<double>(src[t]) * src[t];
      }
      const double mean = sum / group_size;
      const double var = std::max(sq / group_size - mean * mean, 0.0);
      const float inv = static_cast<float>(1.0 / std::sqrt(var + eps_));
      inv_std[i * groups_ + g] = inv;
      float* nrm = normalized.channel(i, g * cpg);
      for (std::size_t t = 0; t < group_size; ++t) nrm[t] = (src[t] - static_cast<float>(mean)) * inv;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const float ga = gamma_.value[ch], be = beta_.value[ch];
        const float* nc = normalized.channel(i, ch);
        float* yc = y.channel(i, ch);
        for (std::size_t t = 0; t < x.plane(); ++t) yc[t] = ga * nc[t] + be;
      }
    }
  }
  return y;
}

Tensor GroupNorm::backward(const Tensor& grad_out) {
  const Tensor& xn = normalized_;
  const int cpg = channels_ / groups_;
  const std::size_t plane = xn.plane();
  const double m = static_cast<double>(cpg * plane);
  Tensor dx(xn.n, xn.c, xn.h, xn.w);
  for (int i = 0; i < xn.n; ++i) {
    for (int g = 0; g < groups_; ++g) {
      // dxhat = dy * gamma; dx = inv/m * (m dxhat - Σdxhat - xhat Σ(dxhat xhat))
      double sum_d = 0.0, sum_dx = 0.0;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const float* gy = grad_out.channel(i, ch);
        const float* nc = xn.channel(i, ch);
        double gsum = 0.0, gbeta = 0.0;
        for (std::size_t t = 0; t < plane; ++t) {
          gsum += static_cast<double>(gy[t]) * nc[t];
          gbeta += gy[t];
        }
        gamma_.grad[ch] += static_cast<float>(gsum);
        beta_.grad[ch] += static_cast<float>(gbeta);
        sum_d += gbeta * gamma_.value[ch];
        sum_dx += gsum * gamma_.value[ch];
      }
      const float inv = inv_std_[i * groups_ + g];
      const float a = static_cast<float>(sum_d / m);
      const float b = static_cast<float>(sum_dx / m);
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const float ga = gamma_.value[ch];
        const float* gy = grad_out.channel(i, ch);
        const float* nc = xn.channel(i, ch);
        float* d = dx.channel(i, ch);
        for (std::size_t t = 0; t < plane; ++t) d[t] = inv * (gy[t] * ga - a - nc[t] * b);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

Tensor Relu::forward(const Tensor& x) {
  output_ = apply(x);
  return output_;
}

Tensor Relu::apply(const Tensor& x) {
  Tensor y = x;
  for (float& v : y.data) v = v > 0.0f ? v : 0.0f;
  return y;
}

Tensor Relu::backward(const Tensor& grad_out) const {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(output_.data[i] > 0.0f)) g.data[i] = 0.0f;
  }
  return g;
}

Tensor MaxPool2::forward(const Tensor& x) {
  in_h_ = x.h;
  in_w_ = x.w;
  return run(x, &argmax_);
}

Tensor MaxPool2::apply(const Tensor& x) { return run(x, nullptr); }

Tensor MaxPool2::run(const Tensor& x, std::vector<std::uint32_t>* argmax) {
  if (x.h % 2 || x.w % 2) throw InputError("MaxPool2: odd spatial size");
  Tensor y(x.n, x.c, x.h / 2, x.w / 2);
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t o = 0;
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      const float* src = x.channel(i, ch);
      for (int yy = 0; yy < y.h; ++yy) {
        for (int xx = 0; xx < y.w; ++xx, ++o) {
          std::uint32_t best = (2 * yy) * x.w + 2 * xx;
          for (std::uint32_t cand : {best + 1, best + x.w, best + x.w + 1}) {
            if (src[cand] > src[best]) best = cand;
          }
          if (argmax) (*argmax)[o] = best;
          y.data[o] = src[best];
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2::backward(const Tensor& grad_out) const {
  Tensor dx(grad_out.n, grad_out.c, in_h_, in_w_);
  const std::size_t in_plane = static_cast<std::size_t>(in_h_) * in_w_;
  const std::size_t out_plane = grad_out.plane();
  for (std::size_t o = 0; o < grad_out.size(); ++o) {
    const std::size_t plane_index = o / out_plane;
    dx.data[plane_index * in_plane + argmax_[o]] += grad_out.data[o];
  }
  return dx;
}

Tensor upsample_nearest2(const Tensor& x) {
  Tensor y(x.n, x.c, x.h * 2, x.w * 2);
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      const float* src = x.channel(i, ch);
      float* dst = y.channel(i, ch);
      for (int yy = 0; yy < y.h; ++yy) {
        const float* srow = src + (yy / 2) * x.w;
        float* drow = dst + yy * y.w;
        for (int xx = 0; xx < y.w; ++xx) drow[xx] = srow[xx / 2];
      }
    }
  }
  return y;
}

Tensor upsample_nearest2_backward(const Tensor& grad_out) {
  Tensor dx(grad_out.n, grad_out.c, grad_out.h / 2, grad_out.w / 2);
  for (int i = 0; i < grad_out.n; ++i) {
    for (int ch = 0; ch < grad_out.c; ++ch) {
      const float* src = grad_out.channel(i, ch);
      float* dst = dx.channel(i, ch);
      for (int yy = 0; yy < grad_out.h; ++yy) {
        for (int xx = 0; xx < grad_out.w; ++xx) dst[(yy / 2) * dx.w + xx / 2] += src[yy * grad_out.w + xx];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

SgdMomentum::SgdMomentum(std::vector<Parameter*> params, float momentum)
    : params_(std::move(params)), momentum_(momentum) {
  for (auto* p : params_) velocity_.emplace_back(p->size(), 0.0f);
}

void SgdMomentum::step(float lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    auto& v = velocity_[i];
    for (std::size_t t = 0; t < p.size(); ++t) {
      v[t] = momentum_ * v[t] + p.grad[t];
      p.value[t] -= lr * v[t];
    }
  }
}

void SgdMomentum::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

}  // namespace endodepth::nn
