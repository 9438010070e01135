#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "endodepth/errors.hpp"

namespace endodepth {

/// Dense row-major H×W×C array. Pixel (row, col) holds `channels` values
/// stored contiguously.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int rows, int cols, int channels = 1, T fill = T{})
      : rows_(rows), cols_(cols), channels_(channels) {
    if (rows < 0 || cols < 0 || channels < 1) {
      throw InputError("Grid: invalid shape");
    }
    data_.assign(static_cast<std::size_t>(rows) * cols * channels, fill);
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  std::size_t pixels() const { return static_cast<std::size_t>(rows_) * cols_; }
  bool empty() const { return data_.empty(); }

  T& operator()(int r, int c, int ch = 0) { return data_[index(r, c, ch)]; }
  const T& operator()(int r, int c, int ch = 0) const { return data_[index(r, c, ch)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  template <typename U>
  bool same_shape(const Grid<U>& other) const {
    return rows_ == other.rows() && cols_ == other.cols() && channels_ == other.channels();
  }

  bool operator==(const Grid& other) const = default;

 private:
  std::size_t index(int r, int c, int ch) const {
    return (static_cast<std::size_t>(r) * cols_ + c) * channels_ + ch;
  }

  int rows_ = 0;
  int cols_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

using RealGrid = Grid<double>;
using MaskGrid = Grid<std::uint8_t>;

template <typename T, typename U>
void require_same_shape(const Grid<T>& a, const Grid<U>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw InputError(std::string(what) + ": shape mismatch");
  }
}

template <typename T, typename U>
void require_same_extent(const Grid<T>& a, const Grid<U>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InputError(std::string(what) + ": image size mismatch");
  }
}

/// Dense depth with a per-pixel validity flag.
struct DepthMap {
  RealGrid values;
  MaskGrid valid;

  DepthMap() = default;
  DepthMap(int rows, int cols, double fill = 0.0)
      : values(rows, cols, 1, fill), valid(rows, cols, 1, 1) {}
  DepthMap(RealGrid v, MaskGrid m) : values(std::move(v)), valid(std::move(m)) {
    require_same_shape(values, valid, "DepthMap");
  }

  int rows() const { return values.rows(); }
  int cols() const { return values.cols(); }
};

/// Dense 2-channel displacement normalized by (W, H).
struct FlowField {
  RealGrid values;
  MaskGrid valid;
  int source_frame = -1;
  int target_frame = -1;
};

}  // namespace endodepth
