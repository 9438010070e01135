#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <set>

#include "endodepth/synthetic.hpp"
#include "endodepth/train_eval.hpp"
#include "support.hpp"

using namespace endodepth;

namespace {

std::vector<int> range_ids(int n) {
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

Image constant_image(int h, int w, float v) { return Image(h, w, 3, v); }

}  // namespace

// ---------------------------------------------------------------------------
// Pair sampling

TEST(SamplePairs, RespectsGapBounds) {
  const auto ids = range_ids(101);
  const auto pairs = sample_pairs(ids, {5, 30}, 5000, 1);
  ASSERT_EQ(pairs.size(), 5000u);
  bool forward = false, backward = false;
  for (const auto& [j, k] : pairs) {
    const int gap = std::abs(k - j);
    EXPECT_GE(gap, 5);
    EXPECT_LE(gap, 30);
    EXPECT_GE(std::min(j, k), 0);
    EXPECT_LE(std::max(j, k), 100);
    forward |= k > j;
    backward |= k < j;
  }
  EXPECT_TRUE(forward && backward);
}

TEST(SamplePairs, ForcedGapAndNonContiguousIds) {
  for (const auto& [j, k] : sample_pairs(range_ids(11), {5, 5}, 500, 2)) EXPECT_EQ(std::abs(k - j), 5);
  // Gaps count positions in the list, not id differences.
  const std::vector<int> ids = {3, 10, 11, 40, 41, 42};
  for (const auto& [j, k] : sample_pairs(ids, {2, 2}, 200, 3)) {
    const auto pj = std::find(ids.begin(), ids.end(), j) - ids.begin();
    const auto pk = std::find(ids.begin(), ids.end(), k) - ids.begin();
    EXPECT_EQ(std::abs(pk - pj), 2);
  }
}

TEST(SamplePairs, DeterministicAndSeedSensitive) {
  const auto ids = range_ids(60);
  EXPECT_EQ(sample_pairs(ids, {5, 30}, 100, 9), sample_pairs(ids, {5, 30}, 100, 9));
  EXPECT_NE(sample_pairs(ids, {5, 30}, 100, 9), sample_pairs(ids, {5, 30}, 100, 10));
}

TEST(SamplePairs, GapDistributionIsUniform) {
  const auto pairs = sample_pairs(range_ids(200), {5, 30}, 10000, 4);
  std::map<int, int> counts;
  for (const auto& [j, k] : pairs) ++counts[std::abs(k - j)];
  ASSERT_EQ(counts.size(), 26u);
  const double expected = 10000.0 / 26.0;
  double chi2 = 0.0;
  for (const auto& [gap, n] : counts) chi2 += (n - expected) * (n - expected) / expected;
  EXPECT_LT(chi2, 44.314);  // chi-square 0.99 quantile, 25 degrees of freedom
}

TEST(SamplePairs, NoAdmissiblePairThrows) {
  EXPECT_THROW(sample_pairs(range_ids(5), {5, 30}, 10, 1), InputError);
  EXPECT_THROW(sample_pairs(range_ids(50), {6, 5}, 10, 1), InputError);
}

// ---------------------------------------------------------------------------
// Augmentation

TEST(Augment, AllTogglesOffIsIdentity) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(16, 20, 3);
  for (float& v : img.storage()) v = u(rng);
  AugmentConfig off{false, false, false, false, false, false, false, false};
  off.probability = 1.0;
  EXPECT_FALSE(off.any());
  for (std::uint64_t seed = 0; seed < 5; ++seed) EXPECT_EQ(augment(img, seed, off), img);
}

TEST(Augment, SeededAndClipped) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(24, 32, 3);
  for (float& v : img.storage()) v = u(rng);
  AugmentConfig all;
  all.probability = 1.0;
  const auto a = augment(img, 77, all), b = augment(img, 77, all), c = augment(img, 78, all);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(a.rows(), img.rows());
  EXPECT_EQ(a.cols(), img.cols());
  for (float v : a.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Augment, BrightnessClosedForm) {
  const auto out = photometric::brightness(constant_image(4, 5, 0.5f), 1.2);
  for (float v : out.values()) EXPECT_NEAR(v, 0.6f, 1e-6);
  const auto clipped = photometric::brightness(constant_image(4, 5, 0.9f), 1.5);
  for (float v : clipped.values()) EXPECT_EQ(v, 1.0f);
}

TEST(Augment, TransformsKeepGeometry) {
  // A single bright pixel stays the brightest after pointwise transforms.
  Image img = constant_image(9, 9, 0.2f);
  for (int ch = 0; ch < 3; ++ch) img(4, 6, ch) = 0.9f;
  for (const auto& out : {photometric::brightness(img, 0.9), photometric::contrast(img, 1.1),
                          photometric::gamma(img, 1.2), photometric::hsv_shift(img, 0.01, 0.9, 1.0),
                          photometric::gaussian_blur(img, 0.7)}) {
    ASSERT_EQ(out.rows(), 9);
    int best = 0;
    for (int i = 1; i < 81; ++i) {
      if (out(i / 9, i % 9, 1) > out(best / 9, best % 9, 1)) best = i;
    }
    EXPECT_EQ(best, 4 * 9 + 6);
  }
}

// ---------------------------------------------------------------------------
// Configuration

TEST(TrainConfig, Defaults) {
  const RunConfig c;
  EXPECT_EQ(c.train.gap.min, 5);
  EXPECT_EQ(c.train.gap.max, 30);
  EXPECT_EQ(c.train.batch_size, 8);
  EXPECT_EQ(c.train.epochs, 80);
  EXPECT_EQ(c.train.momentum, 0.9);
  EXPECT_EQ(c.train.lr_min, 1e-4);
  EXPECT_EQ(c.train.lr_max, 1e-3);
  EXPECT_EQ(c.train.weights.lambda1, 20.0);
  EXPECT_EQ(c.train.weights.lambda2_phase1, 0.1);
  EXPECT_EQ(c.train.weights.lambda2, 5.0);
  EXPECT_NO_THROW(c.train.validate());
}

TEST(TrainConfig, ParseOverrideAndRoundTrip) {
  RunConfig c;
  apply_config_text(c, "# run\nepochs = 3\nlr_max=0.002\ndense_blocks = true\n\nseed = 42 # trailing\n", "t");
  EXPECT_EQ(c.train.epochs, 3);
  EXPECT_EQ(c.train.lr_max, 0.002);
  EXPECT_TRUE(c.model.dense_blocks);
  EXPECT_EQ(c.train.seed, 42u);
  apply_override(c, "batch_size=2");
  EXPECT_EQ(c.train.batch_size, 2);
  RunConfig back;
  apply_config_text(back, to_text(c), "echo");
  EXPECT_EQ(to_text(back), to_text(c));
}

TEST(TrainConfig, RejectsUnknownAndMalformed) {
  RunConfig c;
  EXPECT_THROW(apply_config_text(c, "epochz = 3\n"), ValidationError);
  EXPECT_THROW(apply_config_text(c, "epochs = three\n"), ValidationError);
  EXPECT_THROW(apply_config_text(c, "no equals sign\n"), ValidationError);
  EXPECT_THROW(apply_override(c, "momentum"), ValidationError);
  RunConfig bad;
  bad.train.gap = {6, 5};
  EXPECT_THROW(bad.train.validate(), ValidationError);
  bad = {};
  bad.train.lr_min = bad.train.lr_max;
  EXPECT_THROW(bad.train.validate(), ValidationError);
  bad = {};
  bad.train.batch_size = 0;
  EXPECT_THROW(bad.train.validate(), ValidationError);
}

TEST(TrainConfig, TriangularCyclicalRate) {
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(cyclical_lr(c, 0.0), 1e-4);
  EXPECT_DOUBLE_EQ(cyclical_lr(c, 1.0), 1e-3);
  EXPECT_DOUBLE_EQ(cyclical_lr(c, 0.5), 5.5e-4);
  EXPECT_DOUBLE_EQ(cyclical_lr(c, 1.5), 5.5e-4);
  EXPECT_DOUBLE_EQ(cyclical_lr(c, 2.0), 1e-4);
  EXPECT_DOUBLE_EQ(cyclical_lr(c, 79.0), 1e-3);
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, HandArithmetic) {
  // 1.25^2 < 1.9 < 1.25^3
  const auto m = compute_metrics({1.9, 4.0}, {1.0, 4.0});
  EXPECT_DOUBLE_EQ(m.abs_rel, 0.45);
  EXPECT_DOUBLE_EQ(m.thresh_1_25, 0.5);
  EXPECT_DOUBLE_EQ(m.thresh_1_25_sq, 0.5);
  EXPECT_DOUBLE_EQ(m.thresh_1_25_cu, 1.0);
  EXPECT_EQ(m.n_valid, 2u);
  EXPECT_THROW(compute_metrics({}, {}), InputError);
}

TEST(Metrics, SparseProportionalPredictionIsPerfect) {
  std::mt19937_64 rng(7);
  const auto gt = fixtures::random_depth(rng, 8, 10, 0.5, 3.0);
  RealGrid sparse(8, 10), mask(8, 10);
  for (int i = 0; i < 80; i += 4) {
    sparse[i] = gt.values[i];
    mask[i] = 0.2 + 0.01 * i;
  }
  DepthMap pred = gt;
  for (double& v : pred.values.storage()) v *= 0.37;
  const auto m = evaluate_sparse(pred, sparse, mask);
  EXPECT_NEAR(m.abs_rel, 0.0, 1e-12);
  EXPECT_EQ(m.thresh_1_25, 1.0);
  EXPECT_EQ(m.n_valid, 20u);
  EXPECT_THROW(evaluate_sparse(pred, sparse, RealGrid(8, 10)), InputError);
}

TEST(Metrics, SparseInvariantToPredictionScale) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 10; ++t) {
    const auto pred = fixtures::random_depth(rng, 8, 10, 0.5, 3.0);
    const auto gt = fixtures::random_depth(rng, 8, 10, 0.5, 3.0);
    RealGrid mask(8, 10);
    std::uniform_real_distribution<double> w(0.0, 1.0);
    for (double& v : mask.storage()) v = w(rng) < 0.3 ? w(rng) : 0.0;
    const auto base = evaluate_sparse(pred, gt.values, mask);
    for (double s : {0.5, 4.0, 1024.0}) {
      auto scaled = pred;
      for (double& v : scaled.values.storage()) v *= s;
      const auto m = evaluate_sparse(scaled, gt.values, mask);
      EXPECT_EQ(m.abs_rel, base.abs_rel);
      EXPECT_EQ(m.thresh_1_25, base.thresh_1_25);
    }
    for (double s : {0.013, 3.7, 77.0}) {
      auto scaled = pred;
      for (double& v : scaled.values.storage()) v *= s;
      const auto m = evaluate_sparse(scaled, gt.values, mask);
      EXPECT_NEAR(m.abs_rel, base.abs_rel, 1e-14);
      EXPECT_EQ(m.thresh_1_25, base.thresh_1_25);
      EXPECT_EQ(m.thresh_1_25_sq, base.thresh_1_25_sq);
    }
  }
}

TEST(Metrics, DenseExamples) {
  std::mt19937_64 rng(9);
  const auto gt = fixtures::random_depth(rng, 8, 10, 0.5, 3.0);
  const auto same = evaluate_dense(gt, gt);
  EXPECT_EQ(same.abs_rel, 0.0);
  EXPECT_EQ(same.thresh_1_25, 1.0);

  auto outlier = gt;
  outlier.values[17] *= 2.0;
  EXPECT_NEAR(evaluate_dense(outlier, gt).abs_rel, 1.0 / 80.0, 1e-15);

  auto tripled = gt;
  for (double& v : tripled.values.storage()) v *= 3.0;
  const auto m = evaluate_dense(tripled, gt);
  EXPECT_NEAR(m.abs_rel, 0.0, 1e-15);
  EXPECT_EQ(m.thresh_1_25, 1.0);

  auto none = gt;
  for (auto& v : none.valid.storage()) v = 0;
  EXPECT_THROW(evaluate_dense(none, gt), InputError);
}

TEST(Metrics, AverageAndOrdering) {
  const auto a = compute_metrics({1.0, 2.0, 3.0}, {1.1, 2.6, 1.0});
  EXPECT_LE(a.thresh_1_25, a.thresh_1_25_sq);
  EXPECT_LE(a.thresh_1_25_sq, a.thresh_1_25_cu);
  const auto b = compute_metrics({1.0}, {1.0});
  const auto avg = average({a, b});
  EXPECT_DOUBLE_EQ(avg.abs_rel, 0.5 * a.abs_rel);
  EXPECT_EQ(avg.n_valid, 4u);
}

// ---------------------------------------------------------------------------
// Training on a small noiseless synthetic dataset

class TrainingTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = std::make_unique<fixtures::TempDir>("train_eval");
    synth::DatasetOptions o;
    o.scene.frames = 30;
    o.sfm.noise_sigma = 0.0;
    o.sfm.dropout = 0.0;
    synth::write_dataset(*root_ / "raw", o);
    build_dataset(*root_ / "raw", *root_ / "data");
    data_ = std::make_unique<Dataset>(load_dataset(*root_ / "data"));
  }
  static void TearDownTestSuite() {
    data_.reset();
    root_.reset();
  }

  static RunConfig small_run() {
    RunConfig c;
    c.model.height = 64;
    c.model.width = 80;
    c.model.levels = 2;
    c.model.base_channels = 8;
    c.model.max_channels = 16;
    c.train.epochs = 4;
    c.train.batch_size = 4;
    c.train.gap = {2, 8};
    c.train.serial = true;
    return c;
  }

  static std::unique_ptr<fixtures::TempDir> root_;
  static std::unique_ptr<Dataset> data_;
};

std::unique_ptr<fixtures::TempDir> TrainingTest::root_;
std::unique_ptr<Dataset> TrainingTest::data_;

TEST_F(TrainingTest, DatasetLoads) {
  EXPECT_EQ(data_->frame_ids.size(), 30u);
  EXPECT_EQ(data_->images.size(), 30u);
  for (const auto& gt : data_->depth_gt) EXPECT_TRUE(gt.has_value());
  EXPECT_EQ(data_->index_of(data_->frame_ids.back()), 29u);
  EXPECT_THROW(data_->index_of(1000), InputError);
}

TEST_F(TrainingTest, OneStepDecreasesLossOnAverage) {
  // One momentum-SGD step on a fixed batch, evaluated before and after.
  const auto pairs = sample_pairs(data_->frame_ids, {5, 10}, 4, 1);
  const double sigma = data_->manifest.sigma;
  double change = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ModelConfig mc = small_run().model;
    mc.seed = seed;
    auto net = build_model(mc);
    net->set_input_stats({data_->manifest.image_mean[0], data_->manifest.image_mean[1], data_->manifest.image_mean[2]},
                         {data_->manifest.image_std[0], data_->manifest.image_std[1], data_->manifest.image_std[2]});
    nn::SgdMomentum opt(net->parameters(), 0.9f);
    std::vector<const Image*> ptrs;
    for (const auto& [j, k] : pairs) ptrs.push_back(&data_->images[data_->index_of(j)]);
    for (const auto& [j, k] : pairs) ptrs.push_back(&data_->images[data_->index_of(k)]);
    const auto input = net->pack(ptrs);
    const int n = static_cast<int>(pairs.size());

    auto objective = [&](bool grad, nn::Tensor* g) {
      const auto out = net->forward(input);
      double total = 0.0;
      for (int i = 0; i < n; ++i) {
        const auto [j, k] = pairs[i];
        const auto sj = rasterize_frame(data_->recon, j, sigma), sk = rasterize_frame(data_->recon, k, sigma);
        const auto pair = make_pair_supervision(data_->recon, j, k, sj, sk, true);
        const auto ev = evaluate_pair(net->to_depth(out, i), net->to_depth(out, n + i), pair, 20.0, 0.1, grad);
        EXPECT_FALSE(ev.skipped);
        total += ev.total / n;
        if (grad) {
          for (std::size_t p = 0; p < ev.grad_j.size(); ++p) {
            g->channel(i, 0)[p] = static_cast<float>(ev.grad_j[p] / n);
            g->channel(n + i, 0)[p] = static_cast<float>(ev.grad_k[p] / n);
          }
        }
      }
      return total;
    };
    nn::Tensor g(2 * n, 1, 64, 80);
    const double before = objective(true, &g);
    opt.zero_grad();
    net->backward(g);
    opt.step(1e-3f);
    const double after = objective(false, nullptr);
    change += after - before;
  }
  EXPECT_LT(change / 5.0, 0.0);
}

TEST_F(TrainingTest, SerialRunsAreIdenticalAndWriteArtifacts) {
  auto cfg = small_run();
  cfg.train.epochs = 2;
  TrainOptions a, b;
  a.out_dir = *root_ / "serial_a";
  b.out_dir = *root_ / "serial_b";
  const auto ra = train(*data_, cfg, a), rb = train(*data_, cfg, b);
  ASSERT_EQ(ra.steps.size(), rb.steps.size());
  ASSERT_EQ(ra.steps.size(), 16u);  // 30 pairs per epoch, batches of 4
  for (std::size_t i = 0; i < ra.steps.size(); ++i) {
    EXPECT_EQ(ra.steps[i].total, rb.steps[i].total);
    EXPECT_EQ(ra.steps[i].lr, rb.steps[i].lr);
  }
  EXPECT_TRUE(std::filesystem::exists(a.out_dir / "metrics.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(a.out_dir / "config.txt"));
  EXPECT_TRUE(std::filesystem::exists(a.out_dir / "checkpoints" / "epoch_0002.ckpt"));
  std::ifstream la(a.out_dir / "metrics.jsonl"), lb(b.out_dir / "metrics.jsonl");
  std::string line;
  int records = 0;
  while (std::getline(la, line)) {
    ++records;
    EXPECT_NE(line.find("\"epoch\""), std::string::npos);
  }
  EXPECT_GE(records, 16);

  // The prefetching schedule gives the same curve.
  auto par = cfg;
  par.train.serial = false;
  TrainOptions c;
  c.out_dir = *root_ / "parallel";
  const auto rc = train(*data_, par, c);
  for (std::size_t i = 0; i < ra.steps.size(); ++i) EXPECT_EQ(ra.steps[i].total, rc.steps[i].total);
}

TEST_F(TrainingTest, ResumeIsBitExact) {
  auto cfg = small_run();
  TrainOptions full;
  full.out_dir = *root_ / "full";
  const auto whole = train(*data_, cfg, full);

  TrainOptions first;
  first.out_dir = *root_ / "interrupted";
  first.stop_after_epoch = 3;
  train(*data_, cfg, first);
  TrainOptions second;
  second.out_dir = first.out_dir;
  second.resume_from = first.out_dir / "checkpoints" / "epoch_0003.ckpt";
  const auto rest = train(*data_, cfg, second);

  ASSERT_EQ(rest.epochs.size(), 1u);
  EXPECT_EQ(rest.epochs[0].epoch, 4);
  EXPECT_EQ(rest.epochs[0].total, whole.epochs[3].total);
  const auto a = read_checkpoint(whole.last_checkpoint), b = read_checkpoint(rest.last_checkpoint);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.velocity, b.velocity);
  EXPECT_EQ(a.step, b.step);

  auto other = cfg;
  other.model.base_channels = 16;
  other.model.max_channels = 32;
  TrainOptions bad;
  bad.out_dir = *root_ / "bad_resume";
  bad.resume_from = second.resume_from;
  EXPECT_THROW(train(*data_, other, bad), ValidationError);
}

TEST_F(TrainingTest, ValidationAndModelSelection) {
  auto cfg = small_run();
  cfg.train.epochs = 2;
  TrainOptions o;
  o.out_dir = *root_ / "with_val";
  o.validation_dir = *root_ / "data";
  std::vector<int> seen;
  o.on_epoch = [&](const EpochSummary& s) { seen.push_back(s.epoch); };
  const auto r = train(*data_, cfg, o);
  EXPECT_EQ(seen, (std::vector<int>{1, 2}));
  for (const auto& e : r.epochs) {
    ASSERT_TRUE(e.validation_total.has_value());
    ASSERT_TRUE(e.validation_dense.has_value());
    EXPECT_GT(e.validation_dense->n_valid, 0u);
  }
  ASSERT_TRUE(std::filesystem::exists(r.best_checkpoint));
  auto net = load_model(r.best_checkpoint);
  EXPECT_NEAR(validation_loss(*net, *data_, cfg), std::min(*r.epochs[0].validation_total, *r.epochs[1].validation_total),
              1e-9);
  const auto sparse = evaluate_sparse_dataset(*net, *data_);
  EXPECT_GT(sparse.n_valid, 0u);
}

TEST_F(TrainingTest, MismatchedModelSizeRejected) {
  auto cfg = small_run();
  cfg.model.height = 32;
  TrainOptions o;
  o.out_dir = *root_ / "mismatch";
  EXPECT_THROW(train(*data_, cfg, o), ValidationError);
}
