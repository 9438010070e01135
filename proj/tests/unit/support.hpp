#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "endodepth/camera.hpp"
#include "endodepth/grid.hpp"
#include "endodepth/sfm_io.hpp"

namespace endodepth::fixtures {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

Mat3 random_rotation(std::mt19937_64& rng, double max_angle);
CameraPose random_pose(std::mt19937_64& rng, double max_angle = 0.3, double max_translation = 0.5);

/// 8x10 camera looking down +z with a comfortable field of view.
CameraIntrinsics small_intrinsics();

/// Positive random depth in [lo, hi], all pixels valid.
DepthMap random_depth(std::mt19937_64& rng, int rows, int cols, double lo = 1.0, double hi = 3.0);

/// Reads every regular file under `dir` into (relative path, bytes).
std::string directory_digest(const std::filesystem::path& dir);

/// Two-frame reconstruction with identity first pose and the second camera
/// shifted by `baseline` along x.
SfmReconstruction stereo_reconstruction(const CameraIntrinsics& k, double baseline,
                                        const std::vector<Vec3>& points);

}  // namespace endodepth::fixtures
