#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "endodepth/depth_model.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/objective.hpp"
#include "endodepth/sfm_io.hpp"
#include "endodepth/sparse_supervision.hpp"

namespace endodepth {

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool brightness = true;
  bool contrast = true;
  bool gamma = true;
  bool hsv = true;
  bool gaussian_blur = true;
  bool motion_blur = true;
  bool jpeg = true;
  bool noise = true;
  double probability = 0.5;  // per-transform chance of being applied

  bool any() const {
    return brightness || contrast || gamma || hsv || gaussian_blur || motion_blur || jpeg || noise;
  }
};

/// Seeded random subset of photometric transforms, applied in a fixed order.
/// Pixel positions never move; output is clipped to [0,1].
Image augment(const Image& image, std::uint64_t seed, const AugmentConfig& config = {});

namespace photometric {
Image brightness(const Image& image, double factor);
Image contrast(const Image& image, double factor);
Image gamma(const Image& image, double gamma);
Image hsv_shift(const Image& image, double hue_shift, double saturation_scale, double value_scale);
Image gaussian_blur(const Image& image, double sigma);
Image motion_blur(const Image& image, int length, double angle);
Image jpeg_roundtrip(const Image& image, int quality);
Image gaussian_noise(const Image& image, double sigma, std::uint64_t seed);
}  // namespace photometric

// ---------------------------------------------------------------------------
// Pair sampling

struct GapRange {
  int min = 5;
  int max = 30;
};

/// Uniform draws over all ordered pairs (j, k) with gap_min <= |k - j| <= gap_max,
/// where the gap is measured in positions of `frame_ids`.
std::vector<std::pair<int, int>> sample_pairs(const std::vector<int>& frame_ids, GapRange gap, std::size_t count,
                                              std::uint64_t seed);

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  GapRange gap;
  int batch_size = 8;
  int epochs = 80;
  double momentum = 0.9;
  double lr_min = 1e-4;
  double lr_max = 1e-3;
  int lr_cycle_epochs = 2;
  LossWeights weights;
  double sigma = 0.0;  // soft-mask sigma; <= 0 uses the dataset's value
  double epsilon = kDepthFloor;
  bool sfl_in_view = true;  // restrict SFL to flow entries landing inside the other frame
  std::uint64_t seed = 20190220;
  AugmentConfig augment;
  bool augment_enabled = true;
  bool serial = false;
  int checkpoint_every = 1;

  void validate() const;
};

/// Every configurable field for a run.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Parses flat `key = value` text; '#' starts a comment. Unknown keys and
/// malformed values raise ValidationError.
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin = "config");
void apply_override(RunConfig& config, const std::string& key_value);
std::string to_text(const RunConfig& config);

/// Triangular cyclical rate at a fractional epoch position (0 = start of training).
double cyclical_lr(const TrainConfig& config, double epoch_position);

// ---------------------------------------------------------------------------
// Data

/// A generated dataset loaded into memory.
struct Dataset {
  std::filesystem::path root;
  DatasetManifest manifest;
  SfmReconstruction recon;
  std::vector<int> frame_ids;
  std::vector<Image> images;
  std::vector<FrameSupervision> supervision;
  std::vector<std::optional<DepthMap>> depth_gt;

  std::size_t index_of(int frame_id) const;
};

Dataset load_dataset(const std::filesystem::path& dir);
/// Reads a ground-truth array (zero or negative entries invalid).
DepthMap read_depth_gt(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Metrics

struct EvalMetrics {
  double abs_rel = 0.0;
  double thresh_1_25 = 0.0;
  double thresh_1_25_sq = 0.0;
  double thresh_1_25_cu = 0.0;
  std::size_t n_valid = 0;
};

/// Metrics of `estimate` against `reference` over paired positive values.
EvalMetrics compute_metrics(const std::vector<double>& estimate, const std::vector<double>& reference);

/// Scales the prediction with the depth-scaling layer, then compares it with
/// the sparse depth at positions where the mask is positive.
EvalMetrics evaluate_sparse(const DepthMap& prediction, const RealGrid& sparse_depth, const RealGrid& mask,
                            double epsilon = kDepthFloor);

/// Median-ratio scaled comparison against dense ground truth.
EvalMetrics evaluate_dense(const DepthMap& prediction, const DepthMap& depth_gt);

/// Frame-averaged metrics (n_valid summed).
EvalMetrics average(const std::vector<EvalMetrics>& per_frame);

// ---------------------------------------------------------------------------
// Training

struct StepRecord {
  int epoch = 0;
  std::int64_t step = 0;
  double sfl = 0.0;
  double dcl = 0.0;
  double total = 0.0;
  double lr = 0.0;
  int pairs = 0;
  int skipped = 0;
};

struct EpochSummary {
  int epoch = 0;
  double sfl = 0.0;
  double dcl = 0.0;
  double total = 0.0;
  int skipped = 0;
  std::optional<double> validation_total;
  std::optional<EvalMetrics> validation_dense;
  double seconds = 0.0;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> validation_dir;
  std::optional<std::filesystem::path> resume_from;
  int stop_after_epoch = 0;  // > 0 ends the run early (for interrupted-run tests)
  bool quiet = true;
  std::function<void(const EpochSummary&)> on_epoch;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<EpochSummary> epochs;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
};

/// Two-branch training with shared weights. Writes `metrics.jsonl`,
/// `checkpoints/epoch_NNNN.ckpt`, `last.ckpt` and (with validation) `best.ckpt`.
TrainResult train(const Dataset& data, const RunConfig& config, const TrainOptions& options);

/// Validation objective over a fixed pair set with the final-phase DCL weight.
double validation_loss(DepthNet& net, const Dataset& data, const RunConfig& config);

/// Frame-averaged dense metrics for frames that carry ground truth.
EvalMetrics evaluate_dense_dataset(DepthNet& net, const Dataset& data);
/// Frame-averaged sparse metrics against the dataset's own supervision.
EvalMetrics evaluate_sparse_dataset(DepthNet& net, const Dataset& data, double epsilon = kDepthFloor);

/// Rebuilds the network stored in a checkpoint.
std::unique_ptr<DepthNet> load_model(const std::filesystem::path& checkpoint);

}  // namespace endodepth
