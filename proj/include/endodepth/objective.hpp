#pragma once

#include <string>

#include "endodepth/geom_layers.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/sparse_supervision.hpp"

namespace endodepth {

/// Everything the two-branch objective needs for one frame pair besides the
/// two network predictions.
///
/// Lengths (sparse depths, translations) are stored in units of
/// `length_scale` and, like the sparse flows, rounded to single precision.
/// A reconstruction rescaled by any positive factor therefore yields the same
/// supervision bit for bit.
struct PairSupervision {
  CameraIntrinsics intrinsics;
  double length_scale = 1.0;
  RelativeTransform rel_jk;
  RelativeTransform rel_kj;
  RealGrid sparse_depth_j;
  RealGrid sparse_depth_k;
  /// Frame soft masks, used for depth scaling.
  RealGrid mask_j;
  RealGrid mask_k;
  RealGrid sparse_flow_jk;
  RealGrid sparse_flow_kj;
  /// Soft masks restricted to pixels that carry a sparse flow entry.
  RealGrid flow_mask_j;
  RealGrid flow_mask_k;
};

/// With `in_view_only`, sparse flow entries whose target falls outside the
/// other frame's image are dropped from the flow masks. `length_scale` is the
/// mean positive sparse depth under the frame-j mask (frame k if j has none).
PairSupervision make_pair_supervision(const SfmReconstruction& recon, int frame_j, int frame_k,
                                      const FrameSupervision& sup_j,
                                      const FrameSupervision& sup_k, bool in_view_only = false);

/// Multiplies every coordinate-carrying quantity (sparse depths, relative
/// translations) by `factor`, as rescaling the reconstruction would.
PairSupervision rescale(const PairSupervision& pair, double factor);

struct PairEvaluation {
  bool skipped = false;
  std::string skip_reason;
  double sfl = 0.0;
  double dcl = 0.0;
  double total = 0.0;
  /// dL/dZ' for the raw (unclamped, unscaled) predictions.
  RealGrid grad_j;
  RealGrid grad_k;

  ScaledDepth scaled_j;
  ScaledDepth scaled_k;
  DepthFlow flow_jk;
  DepthFlow flow_kj;
  DepthWarp warp_kj;  // frame k seen from j
  DepthWarp warp_jk;  // frame j seen from k
};

/// Runs clamp → scale → flow → warp → SFL + DCL for one pair. With
/// `lambda2 == 0` an empty warp overlap does not skip the pair.
PairEvaluation evaluate_pair(const DepthMap& prediction_j, const DepthMap& prediction_k,
                             const PairSupervision& pair, double lambda1, double lambda2,
                             bool compute_gradients, double epsilon = kDepthFloor);

}  // namespace endodepth
