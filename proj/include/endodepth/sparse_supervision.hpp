#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "endodepth/grid.hpp"
#include "endodepth/sfm_io.hpp"

namespace endodepth {

/// Camera-frame z of projected points, 0 where nothing projects.
struct SparseDepthMap {
  RealGrid values;
  int frame_id = -1;
};

/// Per-pixel confidence 1 - exp(-track_length / sigma), 0 where empty.
struct SparseSoftMask {
  RealGrid values;
  int frame_id = -1;
};

/// Normalized displacement (du / W, dv / H) stored at the rounded
/// projection in the source frame. `support` marks stored entries.
struct SparseFlowMap {
  RealGrid values;
  MaskGrid support;
  int source_frame = -1;
  int target_frame = -1;
};

double soft_weight(int track_length, double sigma);

struct FrameSupervision {
  SparseDepthMap depth;
  SparseSoftMask mask;
};

/// Rasterizes the points visible in `frame_id` into a sparse depth map and
/// soft mask. Rounding is to nearest with ties to even; when two points
/// land on one pixel the larger weight wins, then the nearer point.
FrameSupervision rasterize_frame(const SfmReconstruction& recon, int frame_id, double sigma);

/// Sparse flow from frame j to frame k for every point visible in j with
/// positive depth in both frames.
SparseFlowMap rasterize_flow(const SfmReconstruction& recon, int frame_j, int frame_k);

struct ManifestFrame {
  int id = 0;
  std::string image;  // relative to the dataset root
  std::string depth;
  std::string mask;
  std::string depth_gt;  // optional, empty when absent
};

/// Description of a generated training dataset directory.
struct DatasetManifest {
  int version = 1;
  double sigma = 0.0;
  int width = 0;
  int height = 0;
  std::string reconstruction = "sfm";
  std::vector<ManifestFrame> frames;
  /// Per-channel RGB statistics over all frames, used for input
  /// standardization.
  double image_mean[3] = {0.0, 0.0, 0.0};
  double image_std[3] = {1.0, 1.0, 1.0};
  double mask_density = 0.0;

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& json);
};

/// Writes per-frame sparse depth maps and soft masks, copies the frame
/// images, stores the (already preprocessed) reconstruction under `sfm/`
/// and a manifest.json. `frames_dir` holds `<frame_id>.png`; when a sibling
/// `depth_gt/<frame_id>.eda` exists it is copied too. Output is a pure
/// function of the inputs.
DatasetManifest generate_dataset(const SfmReconstruction& recon,
                                 const std::filesystem::path& frames_dir,
                                 const std::filesystem::path& out_dir, double sigma);

DatasetManifest load_manifest(const std::filesystem::path& dataset_dir);

struct PreprocessOptions {
  bool filter = true;
  int neighbor_count = 16;
  double std_multiplier = 2.0;
  int smoothing_window = 30;
  double sigma = 0.0;  // <= 0 selects the mean track length after preprocessing
};

/// Full pipeline from a raw reconstruction directory (four text files plus
/// `frames/`): parse, filter, smooth visibility, then generate_dataset.
DatasetManifest build_dataset(const std::filesystem::path& raw_dir, const std::filesystem::path& out_dir,
                              const PreprocessOptions& options = {});

}  // namespace endodepth
