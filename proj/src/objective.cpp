#include "endodepth/objective.hpp"

#include <cmath>

#include "endodepth/errors.hpp"

namespace endodepth {

namespace {

// The volatile store keeps GCC 11's -O3 vectorizer from eliding the narrowing.
double single(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}

double mean_supported_depth(const RealGrid& depth, const RealGrid& mask) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (mask[i] > 0.0 && depth[i] > 0.0) {
      sum += depth[i];
      ++n;
    }
  }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace

PairSupervision make_pair_supervision(const SfmReconstruction& recon, int frame_j, int frame_k,
                                      const FrameSupervision& sup_j,
                                      const FrameSupervision& sup_k, bool in_view_only) {
  PairSupervision p;
  p.intrinsics = recon.intrinsics;
  const auto& pose_j = recon.frames[recon.require_frame(frame_j)].pose;
  const auto& pose_k = recon.frames[recon.require_frame(frame_k)].pose;
  p.rel_jk = relative_transform(pose_j, pose_k, frame_j, frame_k);
  p.rel_kj = relative_transform(pose_k, pose_j, frame_k, frame_j);
  p.sparse_depth_j = sup_j.depth.values;
  p.sparse_depth_k = sup_k.depth.values;
  p.mask_j = sup_j.mask.values;
  p.mask_k = sup_k.mask.values;
  const auto flow_jk = rasterize_flow(recon, frame_j, frame_k);
  const auto flow_kj = rasterize_flow(recon, frame_k, frame_j);
  p.sparse_flow_jk = flow_jk.values;
  p.sparse_flow_kj = flow_kj.values;
  p.flow_mask_j = p.mask_j;
  p.flow_mask_k = p.mask_k;
  for (std::size_t i = 0; i < p.flow_mask_j.size(); ++i) {
    if (!flow_jk.support[i]) p.flow_mask_j[i] = 0.0;
    if (!flow_kj.support[i]) p.flow_mask_k[i] = 0.0;
  }
  double scale = mean_supported_depth(p.sparse_depth_j, p.mask_j);
  if (!(scale > 0.0)) scale = mean_supported_depth(p.sparse_depth_k, p.mask_k);
  if (!(scale > 0.0) || !std::isfinite(scale)) scale = 1.0;
  p.length_scale = scale;
  for (auto* g : {&p.sparse_depth_j, &p.sparse_depth_k}) {
    for (double& z : g->storage()) z = single(z / scale);
  }
  for (auto* rel : {&p.rel_jk, &p.rel_kj}) {
    for (int i = 0; i < 3; ++i) rel->translation[i] = single(rel->translation[i] / scale);
  }
  for (auto* g : {&p.sparse_flow_jk, &p.sparse_flow_kj}) {
    for (double& f : g->storage()) f = single(f);
  }
  if (in_view_only) {
    // Stored entries sit at the rounded source pixel, so the target is
    // recovered to within half a pixel.
    const int W = recon.intrinsics.width, H = recon.intrinsics.height;
    auto prune = [&](const RealGrid& flow, RealGrid& mask) {
      for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
          if (mask(r, c) == 0.0) continue;
          const double u = c + flow(r, c, 0) * W, v = r + flow(r, c, 1) * H;
          if (!(u >= -0.5 && u <= W - 0.5 && v >= -0.5 && v <= H - 0.5)) mask(r, c) = 0.0;
        }
      }
    };
    prune(p.sparse_flow_jk, p.flow_mask_j);
    prune(p.sparse_flow_kj, p.flow_mask_k);
  }
  return p;
}

PairSupervision rescale(const PairSupervision& pair, double factor) {
  PairSupervision out = pair;
  for (double& z : out.sparse_depth_j.storage()) z *= factor;
  for (double& z : out.sparse_depth_k.storage()) z *= factor;
  out.rel_jk.translation *= factor;
  out.rel_kj.translation *= factor;
  return out;
}

PairEvaluation evaluate_pair(const DepthMap& prediction_j, const DepthMap& prediction_k,
                             const PairSupervision& pair, double lambda1, double lambda2,
                             bool compute_gradients, double epsilon) {
  PairEvaluation ev;
  const auto& k = pair.intrinsics;
  const DepthMap clamped_j = clamp_depth(prediction_j, epsilon);
  const DepthMap clamped_k = clamp_depth(prediction_k, epsilon);
  try {
    ev.scaled_j = scale_depth(clamped_j, pair.sparse_depth_j, pair.mask_j, epsilon);
    ev.scaled_k = scale_depth(clamped_k, pair.sparse_depth_k, pair.mask_k, epsilon);
  } catch (const EmptySupportError& e) {
    ev.skipped = true;
    ev.skip_reason = e.what();
    return ev;
  }
  const DepthMap& zj = ev.scaled_j.depth;
  const DepthMap& zk = ev.scaled_k.depth;

  ev.flow_jk = flow_from_depth(zj, pair.rel_jk, k);
  ev.flow_kj = flow_from_depth(zk, pair.rel_kj, k);
  try {
    ev.sfl = sparse_flow_loss(ev.flow_jk.flow, ev.flow_kj.flow, pair.sparse_flow_jk,
                              pair.sparse_flow_kj, pair.flow_mask_j, pair.flow_mask_k);
  } catch (const EmptySupportError& e) {
    ev.skipped = true;
    ev.skip_reason = e.what();
    return ev;
  }

  ev.warp_kj = warp_depth(ev.flow_jk, zj, zk, pair.rel_kj, k);
  ev.warp_jk = warp_depth(ev.flow_kj, zk, zj, pair.rel_jk, k);
  bool dcl_ok = true;
  try {
    ev.dcl = depth_consistency_loss(zj.values, zk.values, ev.warp_kj.warped.values,
                                    ev.warp_jk.warped.values, ev.warp_kj.warped.valid,
                                    ev.warp_jk.warped.valid);
  } catch (const EmptySupportError& e) {
    dcl_ok = false;
    ev.dcl = 0.0;
    if (lambda2 > 0.0) {
      ev.skipped = true;
      ev.skip_reason = e.what();
      return ev;
    }
  }
  ev.total = lambda1 * ev.sfl + lambda2 * ev.dcl;
  if (!compute_gradients) return ev;

  const int rows = zj.rows();
  const int cols = zj.cols();
  RealGrid g_zj(rows, cols);
  RealGrid g_zk(rows, cols);
  RealGrid g_uk_j(rows, cols), g_vk_j(rows, cols);  // coords of flow_jk
  RealGrid g_uk_k(rows, cols), g_vk_k(rows, cols);  // coords of flow_kj

  const auto sfl_g = sparse_flow_loss_backward(ev.flow_jk.flow, ev.flow_kj.flow,
                                               pair.sparse_flow_jk, pair.sparse_flow_kj,
                                               pair.flow_mask_j, pair.flow_mask_k, lambda1);

  if (dcl_ok && lambda2 != 0.0) {
    const auto dg = depth_consistency_loss_backward(
        zj.values, zk.values, ev.warp_kj.warped.values, ev.warp_jk.warped.values,
        ev.warp_kj.warped.valid, ev.warp_jk.warped.valid, lambda2);
    for (std::size_t i = 0; i < g_zj.size(); ++i) {
      g_zj[i] += dg.depth_j[i];
      g_zk[i] += dg.depth_k[i];
    }
    // Ž_kj: coordinates from Z_j through flow_jk, values from Z_k.
    const auto wg_kj = warp_depth_backward(ev.warp_kj, zj, zk, pair.rel_jk, pair.rel_kj, k,
                                           dg.warped_kj, false);
    const auto wg_jk = warp_depth_backward(ev.warp_jk, zk, zj, pair.rel_kj, pair.rel_jk, k,
                                           dg.warped_jk, false);
    for (std::size_t i = 0; i < g_zj.size(); ++i) {
      g_zk[i] += wg_kj.depth_k[i];
      g_zj[i] += wg_jk.depth_k[i];
      g_uk_j[i] = wg_kj.target_u[i];
      g_vk_j[i] = wg_kj.target_v[i];
      g_uk_k[i] = wg_jk.target_u[i];
      g_vk_k[i] = wg_jk.target_v[i];
    }
  }

  const RealGrid fj = flow_from_depth_backward(zj, pair.rel_jk, k, ev.flow_jk, &sfl_g.dense_jk,
                                               &g_uk_j, &g_vk_j);
  const RealGrid fk = flow_from_depth_backward(zk, pair.rel_kj, k, ev.flow_kj, &sfl_g.dense_kj,
                                               &g_uk_k, &g_vk_k);
  for (std::size_t i = 0; i < g_zj.size(); ++i) {
    g_zj[i] += fj[i];
    g_zk[i] += fk[i];
  }

  const RealGrid sj = scale_depth_backward(clamped_j, pair.sparse_depth_j, pair.mask_j,
                                           ev.scaled_j, g_zj, epsilon);
  const RealGrid sk = scale_depth_backward(clamped_k, pair.sparse_depth_k, pair.mask_k,
                                           ev.scaled_k, g_zk, epsilon);
  ev.grad_j = clamp_depth_backward(prediction_j, sj, epsilon);
  ev.grad_k = clamp_depth_backward(prediction_k, sk, epsilon);
  return ev;
}

}  // namespace endodepth
