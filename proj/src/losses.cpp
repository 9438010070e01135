#include "endodepth/losses.hpp"

#include <cmath>

#include "endodepth/errors.hpp"

namespace endodepth {

void LossWeights::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0 || lambda2_phase1 < 0.0) {
    throw InputError("loss weights must be non-negative");
  }
  if (phase1_epochs < 0) throw InputError("phase1_epochs must be non-negative");
}

namespace {

double flow_term(const FlowField& dense, const RealGrid& sparse, const RealGrid& mask) {
  require_same_shape(dense.values, sparse, "sparse_flow_loss");
  require_same_extent(dense.values, mask, "sparse_flow_loss");
  double weight = 0.0;
  double sum = 0.0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    const double m = mask[p];
    if (!(m > 0.0) || !dense.valid[p]) continue;
    weight += m;
    sum += m * (std::abs(sparse[2 * p] - dense.values[2 * p]) +
                std::abs(sparse[2 * p + 1] - dense.values[2 * p + 1]));
  }
  if (!(weight > 0.0)) throw EmptySupportError("sparse_flow_loss: empty mask");
  return sum / weight;
}

RealGrid flow_term_grad(const FlowField& dense, const RealGrid& sparse, const RealGrid& mask,
                        double grad_out) {
  double weight = 0.0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (mask[p] > 0.0 && dense.valid[p]) weight += mask[p];
  }
  RealGrid g(dense.values.rows(), dense.values.cols(), 2);
  if (!(weight > 0.0)) throw EmptySupportError("sparse_flow_loss: empty mask");
  const auto sign = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
  for (std::size_t p = 0; p < mask.size(); ++p) {
    const double m = mask[p];
    if (!(m > 0.0) || !dense.valid[p]) continue;
    for (int c = 0; c < 2; ++c) {
      g[2 * p + c] = grad_out * m / weight * sign(dense.values[2 * p + c] - sparse[2 * p + c]);
    }
  }
  return g;
}

struct Ratio {
  double num = 0.0;
  double den = 0.0;
};

Ratio consistency_term(const RealGrid& depth, const RealGrid& warped, const MaskGrid& overlap) {
  require_same_shape(depth, warped, "depth_consistency_loss");
  require_same_shape(depth, overlap, "depth_consistency_loss");
  Ratio r;
  for (std::size_t p = 0; p < depth.size(); ++p) {
    if (!overlap[p]) continue;
    const double a = depth[p];
    const double b = warped[p];
    r.num += (a - b) * (a - b);
    r.den += a * a + b * b;
  }
  return r;
}

void consistency_grad(const RealGrid& depth, const RealGrid& warped, const MaskGrid& overlap,
                      const Ratio& r, double grad_out, RealGrid& g_depth, RealGrid& g_warped) {
  if (!(r.den > 0.0)) return;
  const double inv = 1.0 / r.den;
  const double q = r.num * inv * inv;
  for (std::size_t p = 0; p < depth.size(); ++p) {
    if (!overlap[p]) continue;
    const double a = depth[p];
    const double b = warped[p];
    // d(N/D) = dN/D - N dD/D²
    g_depth[p] += grad_out * (2.0 * (a - b) * inv - 2.0 * a * q);
    g_warped[p] += grad_out * (-2.0 * (a - b) * inv - 2.0 * b * q);
  }
}

}  // namespace

double sparse_flow_loss(const FlowField& dense_jk, const FlowField& dense_kj,
                        const RealGrid& sparse_jk, const RealGrid& sparse_kj,
                        const RealGrid& mask_j, const RealGrid& mask_k) {
  return flow_term(dense_jk, sparse_jk, mask_j) + flow_term(dense_kj, sparse_kj, mask_k);
}

SparseFlowLossGradients sparse_flow_loss_backward(const FlowField& dense_jk,
                                                  const FlowField& dense_kj,
                                                  const RealGrid& sparse_jk,
                                                  const RealGrid& sparse_kj,
                                                  const RealGrid& mask_j, const RealGrid& mask_k,
                                                  double grad_out) {
  return {flow_term_grad(dense_jk, sparse_jk, mask_j, grad_out),
          flow_term_grad(dense_kj, sparse_kj, mask_k, grad_out)};
}

double depth_consistency_loss(const RealGrid& depth_j, const RealGrid& depth_k,
                              const RealGrid& warped_kj, const RealGrid& warped_jk,
                              const MaskGrid& overlap_jk, const MaskGrid& overlap_kj) {
  const Ratio a = consistency_term(depth_j, warped_kj, overlap_jk);
  const Ratio b = consistency_term(depth_k, warped_jk, overlap_kj);
  if (!(a.den > 0.0) && !(b.den > 0.0)) {
    throw EmptySupportError("depth_consistency_loss: no overlap in either direction");
  }
  double loss = 0.0;
  if (a.den > 0.0) loss += a.num / a.den;
  if (b.den > 0.0) loss += b.num / b.den;
  return loss;
}

DepthConsistencyGradients depth_consistency_loss_backward(
    const RealGrid& depth_j, const RealGrid& depth_k, const RealGrid& warped_kj,
    const RealGrid& warped_jk, const MaskGrid& overlap_jk, const MaskGrid& overlap_kj,
    double grad_out) {
  const Ratio a = consistency_term(depth_j, warped_kj, overlap_jk);
  const Ratio b = consistency_term(depth_k, warped_jk, overlap_kj);
  if (!(a.den > 0.0) && !(b.den > 0.0)) {
    throw EmptySupportError("depth_consistency_loss: no overlap in either direction");
  }
  DepthConsistencyGradients g{RealGrid(depth_j.rows(), depth_j.cols()),
                              RealGrid(depth_k.rows(), depth_k.cols()),
                              RealGrid(depth_j.rows(), depth_j.cols()),
                              RealGrid(depth_k.rows(), depth_k.cols())};
  consistency_grad(depth_j, warped_kj, overlap_jk, a, grad_out, g.depth_j, g.warped_kj);
  consistency_grad(depth_k, warped_jk, overlap_kj, b, grad_out, g.depth_k, g.warped_jk);
  return g;
}

double total_loss(double sfl, double dcl, const LossWeights& weights, int epoch) {
  if (epoch < 1) throw InputError("total_loss: epoch is 1-based");
  return weights.lambda1 * sfl + weights.lambda2_at(epoch) * dcl;
}

}  // namespace endodepth
