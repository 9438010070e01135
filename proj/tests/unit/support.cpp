#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace fs = std::filesystem;

namespace endodepth::fixtures {

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("endodepth_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

Mat3 random_rotation(std::mt19937_64& rng, double max_angle) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> a(-max_angle, max_angle);
  Vec3 axis(n(rng), n(rng), n(rng));
  axis.normalize();
  return Eigen::AngleAxisd(a(rng), axis).toRotationMatrix();
}

CameraPose random_pose(std::mt19937_64& rng, double max_angle, double max_translation) {
  std::uniform_real_distribution<double> t(-max_translation, max_translation);
  CameraPose p;
  p.rotation = random_rotation(rng, max_angle);
  p.translation = Vec3(t(rng), t(rng), t(rng));
  return p;
}

CameraIntrinsics small_intrinsics() { return CameraIntrinsics{8.0, 8.5, 4.5, 3.5, 10, 8}; }

DepthMap random_depth(std::mt19937_64& rng, int rows, int cols, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  DepthMap d(rows, cols);
  for (double& v : d.values.storage()) v = u(rng);
  return d;
}

std::string directory_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::ostringstream os;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    os << fs::relative(f, dir).string() << '\n' << in.rdbuf() << '\n';
  }
  return os.str();
}

SfmReconstruction stereo_reconstruction(const CameraIntrinsics& k, double baseline,
                                        const std::vector<Vec3>& points) {
  SfmReconstruction r;
  r.intrinsics = k;
  r.frames.resize(2);
  r.frames[0].id = 0;
  r.frames[1].id = 1;
  // Camera 1 centre at (baseline, 0, 0): p_cam = p_world - c.
  r.frames[1].pose.translation = Vec3(-baseline, 0.0, 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    r.points.push_back(SparsePoint{static_cast<std::int64_t>(i), points[i], 2});
  }
  r.visibility.assign(points.size() * 2, 1);
  return r;
}

}  // namespace endodepth::fixtures
