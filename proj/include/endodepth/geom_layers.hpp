#pragma once

#include "endodepth/camera.hpp"
#include "endodepth/grid.hpp"

namespace endodepth {

/// Sign applied to K·t when forming the translation term of the
/// flow-from-depth and depth-modification layers. With our relative
/// transform convention (p_k = R p_j + t) the consistent value is +1.
inline constexpr double kTranslationSign = 1.0;

/// Depths at or below this are treated as invalid before geometric use.
inline constexpr double kDepthFloor = 1e-8;

/// Clamps values below `floor` to `floor` and clears their validity.
DepthMap clamp_depth(const DepthMap& depth, double floor = kDepthFloor);
/// Gradient of clamp_depth: passes through where the input was above floor.
RealGrid clamp_depth_backward(const DepthMap& input, const RealGrid& grad_out,
                              double floor = kDepthFloor);

// ---------------------------------------------------------------------------
// Depth scaling

struct ScaledDepth {
  DepthMap depth;
  double scale = 1.0;
  double mask_sum = 0.0;
};

/// Z = s * Z' with s = (1 / ΣM) Σ M Zs / max(Z', eps), sums taken over
/// pixels where the mask is positive and the prediction is valid.
/// Throws EmptySupportError when that mask sum is zero.
ScaledDepth scale_depth(const DepthMap& prediction, const RealGrid& sparse_depth,
                        const RealGrid& mask, double epsilon = kDepthFloor);

/// dL/dZ' given dL/dZ; includes the path through s.
RealGrid scale_depth_backward(const DepthMap& prediction, const RealGrid& sparse_depth,
                              const RealGrid& mask, const ScaledDepth& forward,
                              const RealGrid& grad_out, double epsilon = kDepthFloor);

// ---------------------------------------------------------------------------
// Flow from depth

/// Dense correspondence induced by a depth map and a rigid motion.
/// `target_u`, `target_v` are pixel coordinates in the target frame,
/// `denominator` is the target-frame depth of each lifted pixel.
struct DepthFlow {
  FlowField flow;
  RealGrid target_u;
  RealGrid target_v;
  RealGrid denominator;
};

DepthFlow flow_from_depth(const DepthMap& depth, const RelativeTransform& rel,
                          const CameraIntrinsics& intrinsics);

/// Accumulates the depth gradient from upstream gradients on the normalized
/// flow (2 channels) and/or the raw target coordinates. Null pointers mean
/// no gradient from that output.
RealGrid flow_from_depth_backward(const DepthMap& depth, const RelativeTransform& rel,
                                  const CameraIntrinsics& intrinsics, const DepthFlow& forward,
                                  const RealGrid* grad_flow, const RealGrid* grad_target_u,
                                  const RealGrid* grad_target_v);

// ---------------------------------------------------------------------------
// Bilinear sampling

struct BilinearSample {
  RealGrid values;
  MaskGrid in_bounds;
};

/// Samples `grid` (single channel) at `coords` (2 channels: column, row in
/// pixels). Samples outside [0, W-1] x [0, H-1] are 0 with mask 0.
BilinearSample bilinear_sample(const RealGrid& grid, const RealGrid& coords);

struct BilinearGradients {
  RealGrid grid;
  RealGrid coords;
};

BilinearGradients bilinear_sample_backward(const RealGrid& grid, const RealGrid& coords,
                                           const BilinearSample& forward,
                                           const RealGrid& grad_out);

// ---------------------------------------------------------------------------
// Depth warping

/// Depth of every frame-k pixel expressed in frame j's camera:
/// Z̃ = Z_k (C20 u + C21 v + C22) + D20 with C = K R_kj K⁻¹, D = K t_kj.
RealGrid modify_depth(const RealGrid& depth_k, const RelativeTransform& rel_kj,
                      const CameraIntrinsics& intrinsics);
RealGrid modify_depth_backward(const RelativeTransform& rel_kj, const CameraIntrinsics& intrinsics,
                               const RealGrid& grad_out);

/// Frame k's depth resampled onto frame j's grid. `warped.valid` is the
/// overlap W_jk: sample strictly inside the image, all four neighbours
/// valid with positive modified depth, the frame-j pixel valid and in front
/// of camera k.
struct DepthWarp {
  DepthMap warped;
  DepthFlow flow;
  RealGrid modified;
  RealGrid coords;
  BilinearSample sample;
};

DepthWarp warp_depth(const DepthMap& depth_j, const DepthMap& depth_k,
                     const RelativeTransform& rel_jk, const RelativeTransform& rel_kj,
                     const CameraIntrinsics& intrinsics);

/// Same as above but reuses an already computed flow of depth_j under rel_jk.
DepthWarp warp_depth(const DepthFlow& flow_jk, const DepthMap& depth_j, const DepthMap& depth_k,
                     const RelativeTransform& rel_kj, const CameraIntrinsics& intrinsics);

struct WarpGradients {
  RealGrid depth_j;
  RealGrid depth_k;
  /// Gradients on the flow's target coordinates, for callers that share
  /// the flow with other consumers.
  RealGrid target_u;
  RealGrid target_v;
};

/// Gradients of the warped map w.r.t. both inputs. `grad_out` is ignored
/// where the warp is invalid. When `through_flow` is false, `depth_j` is
/// left zero and the coordinate gradients are returned instead.
WarpGradients warp_depth_backward(const DepthWarp& forward, const DepthMap& depth_j,
                                  const DepthMap& depth_k, const RelativeTransform& rel_jk,
                                  const RelativeTransform& rel_kj,
                                  const CameraIntrinsics& intrinsics, const RealGrid& grad_out,
                                  bool through_flow = true);

}  // namespace endodepth
