#pragma once

#include "endodepth/grid.hpp"

namespace endodepth {

struct LossWeights {
  double lambda1 = 20.0;
  double lambda2_phase1 = 0.1;
  double lambda2 = 5.0;
  int phase1_epochs = 20;

  /// DCL weight in effect at a 1-based epoch.
  double lambda2_at(int epoch) const { return epoch <= phase1_epochs ? lambda2_phase1 : lambda2; }
  void validate() const;
};

/// Weighted L1 between dense and sparse flow in both directions. Absolute
/// differences are summed over the two channels per pixel and normalized by
/// the pixel-weight sum. Pixels where the dense flow is invalid carry no
/// weight. Throws EmptySupportError when either direction has no weight.
double sparse_flow_loss(const FlowField& dense_jk, const FlowField& dense_kj,
                        const RealGrid& sparse_jk, const RealGrid& sparse_kj,
                        const RealGrid& mask_j, const RealGrid& mask_k);

struct SparseFlowLossGradients {
  RealGrid dense_jk;
  RealGrid dense_kj;
};

/// Subgradient of |x| at 0 is taken as 0.
SparseFlowLossGradients sparse_flow_loss_backward(const FlowField& dense_jk,
                                                  const FlowField& dense_kj,
                                                  const RealGrid& sparse_jk,
                                                  const RealGrid& sparse_kj,
                                                  const RealGrid& mask_j, const RealGrid& mask_k,
                                                  double grad_out = 1.0);

/// Symmetric normalized squared difference between each depth map and the
/// other frame's depth warped onto it, restricted to the overlap masks.
/// A direction with a zero denominator contributes 0; EmptySupportError
/// when both do.
double depth_consistency_loss(const RealGrid& depth_j, const RealGrid& depth_k,
                              const RealGrid& warped_kj, const RealGrid& warped_jk,
                              const MaskGrid& overlap_jk, const MaskGrid& overlap_kj);

struct DepthConsistencyGradients {
  RealGrid depth_j;
  RealGrid depth_k;
  RealGrid warped_kj;
  RealGrid warped_jk;
};

DepthConsistencyGradients depth_consistency_loss_backward(
    const RealGrid& depth_j, const RealGrid& depth_k, const RealGrid& warped_kj,
    const RealGrid& warped_jk, const MaskGrid& overlap_jk, const MaskGrid& overlap_kj,
    double grad_out = 1.0);

/// λ₁·sfl + λ₂(epoch)·dcl, epoch is 1-based.
double total_loss(double sfl, double dcl, const LossWeights& weights, int epoch);

}  // namespace endodepth
