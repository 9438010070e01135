#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "endodepth/grid.hpp"
#include "endodepth/image_io.hpp"
#include "endodepth/nn/layers.hpp"

namespace endodepth {

struct ModelConfig {
  int height = 256;
  int width = 320;
  int levels = 4;
  int base_channels = 16;
  int max_channels = 64;   // per-level width is min(base * 2^level, max)
  int groups = 4;          // group-norm groups
  bool dense_blocks = false;
  int border = 0;          // outer pixels excluded from the prediction's validity
  std::uint64_t seed = 20190220;

  void validate() const;
  int channels_at(int level) const;
};

/// Skip-connected encoder-decoder regressing one unbounded depth channel.
///
/// Encoder level l: two conv3x3 + group-norm + ReLU stages, then 2x2 max pooling.
/// Decoder level l: nearest 2x upsampling, conv3x3 stage, concatenation with
/// the encoder skip, two conv3x3 stages. Head: linear 1x1 convolution.
class DepthNet {
 public:
  explicit DepthNet(const ModelConfig& config);
  DepthNet(const DepthNet&) = delete;
  DepthNet& operator=(const DepthNet&) = delete;
  ~DepthNet();

  const ModelConfig& config() const { return config_; }

  /// Per-channel standardization applied to [0,1] RGB before the first layer.
  void set_input_stats(const std::array<double, 3>& mean, const std::array<double, 3>& stddev);
  const std::array<double, 3>& input_mean() const { return mean_; }
  const std::array<double, 3>& input_std() const { return std_; }

  /// Packs [0,1] images into a standardized NCHW batch.
  nn::Tensor pack(const std::vector<const Image*>& images) const;

  /// Raw network pass on a packed batch. Caches activations for backward().
  nn::Tensor forward(const nn::Tensor& input);
  /// Accumulates parameter gradients for d(loss)/d(output).
  void backward(const nn::Tensor& grad_output);

  std::vector<nn::Parameter*> parameters();
  std::size_t parameter_count();
  void zero_grad();

  /// Ordered layer descriptors ("conv3x3 3->16", "upsample_nearest2", ...).
  std::vector<std::string> architecture() const;

  /// Unscaled depth for one image; validity excludes the configured border.
  DepthMap predict(const Image& image);
  std::vector<DepthMap> predict(const std::vector<Image>& images);
  /// Converts one sample of an [n,1,H,W] output to a DepthMap.
  DepthMap to_depth(const nn::Tensor& output, int sample) const;

 private:
  struct Impl;
  ModelConfig config_;
  std::array<double, 3> mean_{0.0, 0.0, 0.0};
  std::array<double, 3> std_{1.0, 1.0, 1.0};
  std::unique_ptr<Impl> impl_;
};

std::unique_ptr<DepthNet> build_model(const ModelConfig& config);

/// Flat key=value rendering of a model config, one field per line.
std::string to_text(const ModelConfig& config);

/// Training state sufficient for bit-exact resume.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  ModelConfig model;
  std::array<double, 3> input_mean{0.0, 0.0, 0.0};
  std::array<double, 3> input_std{1.0, 1.0, 1.0};
  std::string config_text;  // full run configuration echo
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  double best_validation = 0.0;
  std::string rng_state;
  std::vector<std::string> names;
  std::vector<std::vector<float>> values;
  std::vector<std::vector<float>> velocity;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies parameter values from the network (and optional optimizer) into `ckpt`.
void capture_state(DepthNet& net, const nn::SgdMomentum* opt, Checkpoint& ckpt);
/// Restores parameters (and optimizer velocity when `opt` is non-null).
void restore_state(const Checkpoint& ckpt, DepthNet& net, nn::SgdMomentum* opt);

}  // namespace endodepth
