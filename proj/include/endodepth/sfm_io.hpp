#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "endodepth/camera.hpp"

namespace endodepth {

struct SparsePoint {
  std::int64_t id = 0;
  Vec3 position = Vec3::Zero();
  int track_length = 0;
};

struct FrameRecord {
  int id = 0;
  CameraPose pose;
};

/// Sparse multi-view reconstruction of one video sequence.
///
/// `visibility` is a row-major [points x frames] boolean matrix; frames are
/// ordered by video time and a point's track length equals its row sum.
struct SfmReconstruction {
  CameraIntrinsics intrinsics;
  std::vector<FrameRecord> frames;
  std::vector<SparsePoint> points;
  std::vector<std::uint8_t> visibility;

  std::size_t frame_count() const { return frames.size(); }
  std::size_t point_count() const { return points.size(); }

  bool visible(std::size_t point, std::size_t frame) const {
    return visibility[point * frames.size() + frame] != 0;
  }
  void set_visible(std::size_t point, std::size_t frame, bool value) {
    visibility[point * frames.size() + frame] = value ? 1 : 0;
  }

  /// Position of `frame_id` in video order; nullopt if absent.
  std::optional<std::size_t> frame_index(int frame_id) const;
  /// Same as frame_index but throws InputError on unknown ids.
  std::size_t require_frame(int frame_id) const;

  double mean_track_length() const;

  /// Sets every point's track length to its visibility row sum.
  void recount_tracks();

  /// Throws ValidationError naming the offending frame or point.
  void validate() const;
};

/// Reads `intrinsics.txt`, `poses.txt`, `points.txt` and `visibility.txt`
/// from `dir`. The `frames/` image directory is not touched.
SfmReconstruction parse_reconstruction(const std::filesystem::path& dir);

/// Writes the four text files. Floating-point values use the shortest
/// representation that parses back to the same double.
void write_reconstruction(const SfmReconstruction& recon, const std::filesystem::path& dir);

/// Statistical outlier removal on point positions. A point is dropped if the
/// mean distance to its `neighbor_count` nearest neighbours exceeds
/// mean + std_multiplier * stddev of that statistic over all points.
SfmReconstruction filter_points(const SfmReconstruction& recon, int neighbor_count = 16,
                                double std_multiplier = 2.0);

/// Marks a point visible at frame j if it was visible within ±window frames
/// (video order) and projects in-bounds at j with positive depth. Never
/// clears a bit. Track lengths are recounted.
SfmReconstruction smooth_visibility(const SfmReconstruction& recon, int window);

Projection project_point(const CameraIntrinsics& intrinsics, const CameraPose& pose,
                         const SparsePoint& point);

}  // namespace endodepth
