#include "endodepth/geom_layers.hpp"

#include <algorithm>
#include <cmath>

#include "endodepth/errors.hpp"

namespace endodepth {

DepthMap clamp_depth(const DepthMap& depth, double floor) {
  DepthMap out = depth;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const double z = out.values[i];
    if (!(z > floor)) {
      out.values[i] = floor;
      out.valid[i] = 0;
    }
  }
  return out;
}

RealGrid clamp_depth_backward(const DepthMap& input, const RealGrid& grad_out, double floor) {
  RealGrid g(input.rows(), input.cols());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = input.values[i] > floor ? grad_out[i] : 0.0;
  return g;
}

// ---------------------------------------------------------------------------

ScaledDepth scale_depth(const DepthMap& prediction, const RealGrid& sparse_depth,
                        const RealGrid& mask, double epsilon) {
  require_same_shape(prediction.values, sparse_depth, "scale_depth");
  require_same_shape(prediction.values, mask, "scale_depth");
  if (!(epsilon > 0.0)) throw InputError("scale_depth: epsilon must be positive");
  double mask_sum = 0.0;
  double ratio_sum = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!(mask[i] > 0.0) || !prediction.valid[i]) continue;
    mask_sum += mask[i];
    ratio_sum += mask[i] * sparse_depth[i] / std::max(prediction.values[i], epsilon);
  }
  if (!(mask_sum > 0.0)) throw EmptySupportError("scale_depth: empty sparse mask");
  ScaledDepth out;
  out.mask_sum = mask_sum;
  out.scale = ratio_sum / mask_sum;
  out.depth = prediction;
  for (double& z : out.depth.values.storage()) z *= out.scale;
  return out;
}

RealGrid scale_depth_backward(const DepthMap& prediction, const RealGrid& sparse_depth,
                              const RealGrid& mask, const ScaledDepth& forward,
                              const RealGrid& grad_out, double epsilon) {
  const std::size_t n = prediction.values.size();
  RealGrid grad(prediction.rows(), prediction.cols());
  // dL/ds = Σ g_i Z'_i
  double grad_scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    grad[i] = grad_out[i] * forward.scale;
    grad_scale += grad_out[i] * prediction.values[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!(mask[i] > 0.0) || !prediction.valid[i]) continue;
    const double z = prediction.values[i];
    if (!(z > epsilon)) continue;
    grad[i] -= grad_scale * mask[i] * sparse_depth[i] / (z * z) / forward.mask_sum;
  }
  return grad;
}

// ---------------------------------------------------------------------------

namespace {

struct ProjectiveTerms {
  Mat3 a;  // K R K⁻¹
  Vec3 b;  // ±K t
  Mat3 d;  // K (R - I) K⁻¹
};

ProjectiveTerms projective_terms(const RelativeTransform& rel, const CameraIntrinsics& k) {
  ProjectiveTerms t;
  const Mat3 km = k.matrix();
  t.d = km * (rel.rotation - Mat3::Identity()) * k.inverse_matrix();
  t.a = t.d + Mat3::Identity();
  t.b = kTranslationSign * (km * rel.translation);
  return t;
}

}  // namespace

DepthFlow flow_from_depth(const DepthMap& depth, const RelativeTransform& rel,
                          const CameraIntrinsics& intrinsics) {
  const int rows = depth.rows();
  const int cols = depth.cols();
  if (rows != intrinsics.height || cols != intrinsics.width) {
    throw InputError("flow_from_depth: depth size does not match intrinsics");
  }
  // Displacements are formed from D = A - I so that the identity transform
  // gives exactly zero flow.
  const auto [a, b, d] = projective_terms(rel, intrinsics);
  DepthFlow out;
  out.flow.values = RealGrid(rows, cols, 2);
  out.flow.valid = MaskGrid(rows, cols);
  out.flow.source_frame = rel.source_frame;
  out.flow.target_frame = rel.target_frame;
  out.target_u = RealGrid(rows, cols);
  out.target_v = RealGrid(rows, cols);
  out.denominator = RealGrid(rows, cols);
  const double w_inv = 1.0 / cols;
  const double h_inv = 1.0 / rows;
  for (int r = 0; r < rows; ++r) {
    const double v = r;
    for (int c = 0; c < cols; ++c) {
      const double u = c;
      const double z = depth.values(r, c);
      const double d2 = d(2, 0) * u + d(2, 1) * v + d(2, 2);
      const double den = z * (1.0 + d2) + b(2);
      out.denominator(r, c) = den;
      const bool ok = depth.valid(r, c) && std::abs(den) >= 1e-12 && std::isfinite(den);
      if (!ok) {
        out.target_u(r, c) = u;
        out.target_v(r, c) = v;
        continue;
      }
      const double d0 = d(0, 0) * u + d(0, 1) * v + d(0, 2);
      const double d1 = d(1, 0) * u + d(1, 1) * v + d(1, 2);
      const double du = (z * (d0 - u * d2) + b(0) - u * b(2)) / den;
      const double dv = (z * (d1 - v * d2) + b(1) - v * b(2)) / den;
      out.target_u(r, c) = u + du;
      out.target_v(r, c) = v + dv;
      out.flow.values(r, c, 0) = du * w_inv;
      out.flow.values(r, c, 1) = dv * h_inv;
      out.flow.valid(r, c) = 1;
    }
  }
  return out;
}

RealGrid flow_from_depth_backward(const DepthMap& depth, const RelativeTransform& rel,
                                  const CameraIntrinsics& intrinsics, const DepthFlow& forward,
                                  const RealGrid* grad_flow, const RealGrid* grad_target_u,
                                  const RealGrid* grad_target_v) {
  const int rows = depth.rows();
  const int cols = depth.cols();
  const auto [a, b, d_unused] = projective_terms(rel, intrinsics);
  RealGrid grad(rows, cols);
  const double w_inv = 1.0 / cols;
  const double h_inv = 1.0 / rows;
  for (int r = 0; r < rows; ++r) {
    const double v = r;
    for (int c = 0; c < cols; ++c) {
      if (!forward.flow.valid(r, c)) continue;
      const double u = c;
      double gu = 0.0;
      double gv = 0.0;
      if (grad_flow) {
        gu += (*grad_flow)(r, c, 0) * w_inv;
        gv += (*grad_flow)(r, c, 1) * h_inv;
      }
      if (grad_target_u) gu += (*grad_target_u)(r, c);
      if (grad_target_v) gv += (*grad_target_v)(r, c);
      if (gu == 0.0 && gv == 0.0) continue;
      const double den = forward.denominator(r, c);
      const double a2 = a(2, 0) * u + a(2, 1) * v + a(2, 2);
      // d(N/D)/dz = (a_m - (N/D) a_2) / D
      const double du = (a(0, 0) * u + a(0, 1) * v + a(0, 2) - forward.target_u(r, c) * a2) / den;
      const double dv = (a(1, 0) * u + a(1, 1) * v + a(1, 2) - forward.target_v(r, c) * a2) / den;
      grad(r, c) = gu * du + gv * dv;
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------

namespace {

struct Stencil {
  int x0, y0;
  double fx, fy;
};

// Lower-left neighbour and fractional offsets; x == W-1 maps onto the last
// cell with fx = 1 so that four neighbours always exist.
Stencil stencil(double x, double y, int cols, int rows) {
  Stencil s;
  s.x0 = std::min(static_cast<int>(std::floor(x)), std::max(cols - 2, 0));
  s.y0 = std::min(static_cast<int>(std::floor(y)), std::max(rows - 2, 0));
  s.fx = x - s.x0;
  s.fy = y - s.y0;
  return s;
}

bool inside(double x, double y, int cols, int rows) {
  return x >= 0.0 && y >= 0.0 && x <= cols - 1 && y <= rows - 1;
}

}  // namespace

BilinearSample bilinear_sample(const RealGrid& grid, const RealGrid& coords) {
  if (grid.channels() != 1 || coords.channels() != 2) {
    throw InputError("bilinear_sample: expected 1-channel grid and 2-channel coords");
  }
  const int rows = grid.rows();
  const int cols = grid.cols();
  BilinearSample out{RealGrid(coords.rows(), coords.cols()), MaskGrid(coords.rows(), coords.cols())};
  if (rows < 2 || cols < 2) throw InputError("bilinear_sample: grid must be at least 2x2");
  for (std::size_t p = 0; p < out.values.size(); ++p) {
    const double x = coords[2 * p];
    const double y = coords[2 * p + 1];
    if (!inside(x, y, cols, rows)) continue;
    const auto s = stencil(x, y, cols, rows);
    const double v00 = grid(s.y0, s.x0), v01 = grid(s.y0, s.x0 + 1);
    const double v10 = grid(s.y0 + 1, s.x0), v11 = grid(s.y0 + 1, s.x0 + 1);
    out.values[p] = (1 - s.fy) * ((1 - s.fx) * v00 + s.fx * v01) + s.fy * ((1 - s.fx) * v10 + s.fx * v11);
    out.in_bounds[p] = 1;
  }
  return out;
}

BilinearGradients bilinear_sample_backward(const RealGrid& grid, const RealGrid& coords,
                                           const BilinearSample& forward,
                                           const RealGrid& grad_out) {
  const int rows = grid.rows();
  const int cols = grid.cols();
  BilinearGradients g{RealGrid(rows, cols), RealGrid(coords.rows(), coords.cols(), 2)};
  for (std::size_t p = 0; p < forward.values.size(); ++p) {
    if (!forward.in_bounds[p]) continue;
    const double go = grad_out[p];
    if (go == 0.0) continue;
    const auto s = stencil(coords[2 * p], coords[2 * p + 1], cols, rows);
    const double v00 = grid(s.y0, s.x0), v01 = grid(s.y0, s.x0 + 1);
    const double v10 = grid(s.y0 + 1, s.x0), v11 = grid(s.y0 + 1, s.x0 + 1);
    g.grid(s.y0, s.x0) += go * (1 - s.fx) * (1 - s.fy);
    g.grid(s.y0, s.x0 + 1) += go * s.fx * (1 - s.fy);
    g.grid(s.y0 + 1, s.x0) += go * (1 - s.fx) * s.fy;
    g.grid(s.y0 + 1, s.x0 + 1) += go * s.fx * s.fy;
    g.coords[2 * p] = go * ((1 - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
    g.coords[2 * p + 1] = go * ((1 - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
  }
  return g;
}

// ---------------------------------------------------------------------------

RealGrid modify_depth(const RealGrid& depth_k, const RelativeTransform& rel_kj,
                      const CameraIntrinsics& intrinsics) {
  const auto [c, d, e_unused] = projective_terms(rel_kj, intrinsics);
  RealGrid out(depth_k.rows(), depth_k.cols());
  for (int r = 0; r < depth_k.rows(); ++r) {
    for (int col = 0; col < depth_k.cols(); ++col) {
      out(r, col) = depth_k(r, col) * (c(2, 0) * col + c(2, 1) * r + c(2, 2)) + d(2);
    }
  }
  return out;
}

RealGrid modify_depth_backward(const RelativeTransform& rel_kj, const CameraIntrinsics& intrinsics,
                               const RealGrid& grad_out) {
  const auto [c, d, e_unused] = projective_terms(rel_kj, intrinsics);
  (void)d;
  RealGrid g(grad_out.rows(), grad_out.cols());
  for (int r = 0; r < g.rows(); ++r) {
    for (int col = 0; col < g.cols(); ++col) {
      g(r, col) = grad_out(r, col) * (c(2, 0) * col + c(2, 1) * r + c(2, 2));
    }
  }
  return g;
}

DepthWarp warp_depth(const DepthFlow& flow_jk, const DepthMap& depth_j, const DepthMap& depth_k,
                     const RelativeTransform& rel_kj, const CameraIntrinsics& intrinsics) {
  require_same_shape(depth_j.values, depth_k.values, "warp_depth");
  const int rows = depth_j.rows();
  const int cols = depth_j.cols();
  DepthWarp out;
  out.flow = flow_jk;
  out.modified = modify_depth(depth_k.values, rel_kj, intrinsics);
  out.coords = RealGrid(rows, cols, 2);
  for (std::size_t p = 0; p < depth_j.values.size(); ++p) {
    out.coords[2 * p] = flow_jk.target_u[p];
    out.coords[2 * p + 1] = flow_jk.target_v[p];
  }
  out.sample = bilinear_sample(out.modified, out.coords);
  out.warped = DepthMap(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      bool ok = depth_j.valid(r, c) && flow_jk.flow.valid(r, c) && flow_jk.denominator(r, c) > 0.0;
      const double x = flow_jk.target_u(r, c);
      const double y = flow_jk.target_v(r, c);
      ok = ok && x > 0.0 && y > 0.0 && x < cols - 1 && y < rows - 1;
      if (ok) {
        const auto s = stencil(x, y, cols, rows);
        for (int dy = 0; dy < 2 && ok; ++dy) {
          for (int dx = 0; dx < 2 && ok; ++dx) {
            ok = depth_k.valid(s.y0 + dy, s.x0 + dx) && out.modified(s.y0 + dy, s.x0 + dx) > 0.0;
          }
        }
      }
      out.warped.valid(r, c) = ok ? 1 : 0;
      out.warped.values(r, c) = ok ? out.sample.values(r, c) : 0.0;
    }
  }
  return out;
}

DepthWarp warp_depth(const DepthMap& depth_j, const DepthMap& depth_k,
                     const RelativeTransform& rel_jk, const RelativeTransform& rel_kj,
                     const CameraIntrinsics& intrinsics) {
  return warp_depth(flow_from_depth(depth_j, rel_jk, intrinsics), depth_j, depth_k, rel_kj,
                    intrinsics);
}

WarpGradients warp_depth_backward(const DepthWarp& forward, const DepthMap& depth_j,
                                  [[maybe_unused]] const DepthMap& depth_k, const RelativeTransform& rel_jk,
                                  const RelativeTransform& rel_kj,
                                  const CameraIntrinsics& intrinsics, const RealGrid& grad_out,
                                  bool through_flow) {
  const int rows = depth_j.rows();
  const int cols = depth_j.cols();
  RealGrid masked(rows, cols);
  for (std::size_t p = 0; p < masked.size(); ++p) {
    masked[p] = forward.warped.valid[p] ? grad_out[p] : 0.0;
  }
  const auto bg = bilinear_sample_backward(forward.modified, forward.coords, forward.sample, masked);
  WarpGradients g;
  g.depth_k = modify_depth_backward(rel_kj, intrinsics, bg.grid);
  g.target_u = RealGrid(rows, cols);
  g.target_v = RealGrid(rows, cols);
  for (std::size_t p = 0; p < masked.size(); ++p) {
    g.target_u[p] = bg.coords[2 * p];
    g.target_v[p] = bg.coords[2 * p + 1];
  }
  if (through_flow) {
    g.depth_j = flow_from_depth_backward(depth_j, rel_jk, intrinsics, forward.flow, nullptr,
                                         &g.target_u, &g.target_v);
  } else {
    g.depth_j = RealGrid(rows, cols);
  }
  return g;
}

}  // namespace endodepth
