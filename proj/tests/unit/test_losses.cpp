#include <gtest/gtest.h>

#include <random>

#include "endodepth/losses.hpp"
#include "endodepth/objective.hpp"
#include "endodepth/synthetic.hpp"
#include "support.hpp"

using namespace endodepth;

namespace {

FlowField dense(const RealGrid& values) {
  FlowField f;
  f.values = values;
  f.valid = MaskGrid(values.rows(), values.cols(), 1, 1);
  return f;
}

struct DclInputs {
  RealGrid zj, zk, wkj, wjk;
  MaskGrid ojk, okj;
};

DclInputs random_dcl(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 3.0);
  std::bernoulli_distribution keep(0.8);
  DclInputs in{RealGrid(8, 10), RealGrid(8, 10), RealGrid(8, 10), RealGrid(8, 10), MaskGrid(8, 10), MaskGrid(8, 10)};
  for (std::size_t i = 0; i < 80; ++i) {
    in.zj[i] = u(rng);
    in.zk[i] = u(rng);
    in.wkj[i] = u(rng);
    in.wjk[i] = u(rng);
    in.ojk[i] = keep(rng);
    in.okj[i] = keep(rng);
  }
  return in;
}

}  // namespace

TEST(SparseFlowLoss, ZeroWhenDenseMatchesSparse) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  RealGrid s(8, 10, 2), m(8, 10);
  for (double& v : s.storage()) v = u(rng);
  for (int i = 0; i < 80; i += 5) m[i] = 0.7;
  EXPECT_EQ(sparse_flow_loss(dense(s), dense(s), s, s, m, m), 0.0);
}

TEST(SparseFlowLoss, HandExample) {
  RealGrid d(2, 2, 2), s(2, 2, 2), m(2, 2);
  m(1, 0) = 0.5;
  s(1, 0, 0) = 0.01;
  s(1, 0, 1) = -0.02;
  EXPECT_NEAR(sparse_flow_loss(dense(d), dense(d), s, s, m, m), 0.06, 1e-15);
}

TEST(SparseFlowLoss, GradientOnlyOnMaskSupport) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  RealGrid a(8, 10, 2), b(8, 10, 2), s(8, 10, 2), m(8, 10);
  for (double& v : a.storage()) v = u(rng);
  for (double& v : b.storage()) v = u(rng);
  for (double& v : s.storage()) v = u(rng);
  for (int i = 0; i < 80; i += 9) m[i] = 0.4;
  const auto g = sparse_flow_loss_backward(dense(a), dense(b), s, s, m, m);
  for (std::size_t p = 0; p < 80; ++p) {
    if (m[p] == 0.0) {
      EXPECT_EQ(g.dense_jk[2 * p], 0.0);
      EXPECT_EQ(g.dense_kj[2 * p + 1], 0.0);
    } else {
      EXPECT_NE(g.dense_jk[2 * p], 0.0);
    }
  }
}

TEST(SparseFlowLoss, EmptyMaskThrows) {
  RealGrid z(2, 2, 2), m(2, 2);
  EXPECT_THROW(sparse_flow_loss(dense(z), dense(z), z, z, m, m), EmptySupportError);
}

TEST(SparseFlowLoss, SymmetricUnderSwap) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.1, 0.1), w(0.0, 1.0);
  RealGrid a(8, 10, 2), b(8, 10, 2), sa(8, 10, 2), sb(8, 10, 2), ma(8, 10), mb(8, 10);
  for (auto* g : {&a, &b, &sa, &sb}) {
    for (double& v : g->storage()) v = u(rng);
  }
  for (auto* g : {&ma, &mb}) {
    for (double& v : g->storage()) v = w(rng);
  }
  EXPECT_EQ(sparse_flow_loss(dense(a), dense(b), sa, sb, ma, mb), sparse_flow_loss(dense(b), dense(a), sb, sa, mb, ma));
}

TEST(DepthConsistencyLoss, ZeroWhenWarpsAgree) {
  std::mt19937_64 rng(4);
  auto in = random_dcl(rng);
  EXPECT_EQ(depth_consistency_loss(in.zj, in.zk, in.zj, in.zk, in.ojk, in.okj), 0.0);
}

TEST(DepthConsistencyLoss, UniformDoubleIsPointFour) {
  std::mt19937_64 rng(5);
  auto in = random_dcl(rng);
  RealGrid wkj = in.zj, wjk = in.zk;
  for (double& v : wkj.storage()) v *= 2.0;
  for (double& v : wjk.storage()) v *= 2.0;
  const MaskGrid all(8, 10, 1, 1);
  EXPECT_NEAR(depth_consistency_loss(in.zj, in.zk, wkj, wjk, all, all), 0.4, 1e-9);
}

TEST(DepthConsistencyLoss, JointRescaleInvariantAndSymmetric) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    auto in = random_dcl(rng);
    const double base = depth_consistency_loss(in.zj, in.zk, in.wkj, in.wjk, in.ojk, in.okj);
    EXPECT_GE(base, 0.0);
    for (double s : {1e-3, 0.37, 10.0, 4096.0}) {
      auto sc = in;
      for (auto* g : {&sc.zj, &sc.zk, &sc.wkj, &sc.wjk}) {
        for (double& v : g->storage()) v *= s;
      }
      EXPECT_NEAR(depth_consistency_loss(sc.zj, sc.zk, sc.wkj, sc.wjk, sc.ojk, sc.okj), base, 1e-15 * 64);
    }
    EXPECT_NEAR(depth_consistency_loss(in.zk, in.zj, in.wjk, in.wkj, in.okj, in.ojk), base, 1e-15);
  }
}

TEST(TotalLoss, DefaultsAndSchedule) {
  const LossWeights w;
  EXPECT_EQ(w.lambda1, 20.0);
  EXPECT_EQ(w.lambda2, 5.0);
  EXPECT_EQ(w.lambda2_phase1, 0.1);
  EXPECT_EQ(w.phase1_epochs, 20);
  EXPECT_NEAR(total_loss(0.1, 1.0, w, 20), 2.1, 1e-12);
  EXPECT_NEAR(total_loss(0.1, 1.0, w, 21), 7.0, 1e-12);
  EXPECT_EQ(total_loss(0.0, 0.0, w, 3), 0.0);
}

namespace {

PairSupervision synthetic_pair(int gap, synth::SceneBundle& bundle_out, DepthMap& dj, DepthMap& dk) {
  synth::SceneConfig sc;
  sc.frames = 40;
  bundle_out = synth::make_scene(21, sc);
  synth::SfmSimConfig cfg;
  cfg.n_points = 400;
  const auto k = synth::default_intrinsics();
  const auto sim = synth::simulate_sfm(bundle_out.scene, bundle_out.trajectory, k, cfg);
  const double sigma = sim.recon.mean_track_length();
  const int j = 5;
  const auto sj = rasterize_frame(sim.recon, j, sigma), sk = rasterize_frame(sim.recon, j + gap, sigma);
  dj = synth::render_frame(bundle_out.scene, bundle_out.trajectory.poses[j], k).depth;
  dk = synth::render_frame(bundle_out.scene, bundle_out.trajectory.poses[j + gap], k).depth;
  return make_pair_supervision(sim.recon, j, j + gap, {sj.depth, sj.mask}, {sk.depth, sk.mask});
}

}  // namespace

TEST(PairObjective, ReconstructionRescaleKeepsSflBitIdentical) {
  synth::SceneBundle bundle{synth::Scene(1, {}), {}};
  DepthMap dj, dk;
  const auto pair = synthetic_pair(8, bundle, dj, dk);
  const auto base = evaluate_pair(dj, dk, pair, 20.0, 5.0, false);
  ASSERT_FALSE(base.skipped) << base.skip_reason;
  for (double f : {2.0, 8.0, 0.25}) {
    const auto ev = evaluate_pair(dj, dk, rescale(pair, f), 20.0, 5.0, false);
    EXPECT_EQ(ev.sfl, base.sfl) << f;
    EXPECT_EQ(ev.dcl, base.dcl) << f;
  }
  const auto ten = evaluate_pair(dj, dk, rescale(pair, 10.0), 20.0, 5.0, false);
  EXPECT_NEAR(ten.sfl, base.sfl, 1e-12 * base.sfl);
}

TEST(PairObjective, TrueDepthBeatsConstantDepth) {
  synth::SceneBundle bundle{synth::Scene(1, {}), {}};
  DepthMap dj, dk;
  const auto pair = synthetic_pair(10, bundle, dj, dk);
  const auto truth = evaluate_pair(dj, dk, pair, 20.0, 5.0, false);
  const auto flat = evaluate_pair(DepthMap(dj.rows(), dj.cols(), 1.0), DepthMap(dk.rows(), dk.cols(), 1.0), pair,
                                  20.0, 5.0, false);
  ASSERT_FALSE(truth.skipped);
  ASSERT_FALSE(flat.skipped);
  EXPECT_LT(truth.sfl, 0.25 * flat.sfl);
  // Grazing walls keep the true-depth DCL above zero at this resolution, but
  // per-pixel noise raises it further.
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> jitter(0.7, 1.3);
  DepthMap nj = dj, nk = dk;
  for (double& v : nj.values.storage()) v *= jitter(rng);
  for (double& v : nk.values.storage()) v *= jitter(rng);
  const auto noisy = evaluate_pair(nj, nk, pair, 20.0, 5.0, false);
  ASSERT_FALSE(noisy.skipped);
  EXPECT_LT(truth.dcl, noisy.dcl);
  EXPECT_LT(truth.sfl, noisy.sfl);
}

TEST(PairObjective, EmptySupportSkipsPair) {
  synth::SceneBundle bundle{synth::Scene(1, {}), {}};
  DepthMap dj, dk;
  auto pair = synthetic_pair(6, bundle, dj, dk);
  for (double& v : pair.mask_j.storage()) v = 0.0;
  const auto ev = evaluate_pair(dj, dk, pair, 20.0, 5.0, false);
  EXPECT_TRUE(ev.skipped);
  EXPECT_FALSE(ev.skip_reason.empty());
}
