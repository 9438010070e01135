#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "endodepth/camera.hpp"
#include "endodepth/grid.hpp"
#include "endodepth/image_io.hpp"
#include "endodepth/sfm_io.hpp"

namespace endodepth::synth {

struct SceneConfig {
  double length = 24.0;           // tube extent along z, capped at both ends
  double radius = 1.0;            // mean cross-section radius
  double radius_variation = 0.2;  // relative amplitude of slow radius changes
  double bump_amplitude = 0.04;   // absolute amplitude of the wall bumps
  int bump_terms = 6;
  double bend_amplitude = 0.8;    // lateral centerline excursion
  double bend_wavelength = 9.0;
  double texture_scale = 3.0;     // noise cells per unit length
  double texture_contrast = 0.45;
  double light_power = 0.9;
  double ambient = 0.02;
  double specular = 0.25;
  double shininess = 24.0;

  int frames = 200;
  double step = 0.05;             // camera advance per frame along the centerline
  double start = 2.0;             // z of the first camera
  double wobble = 0.15;           // lateral camera offset as a fraction of radius
  double look_jitter = 0.12;      // radians of periodic view-direction wobble

  double march_tolerance = 1e-4;
  int march_steps = 256;

  void validate() const;
};

struct RayHit {
  bool hit = false;
  double t = 0.0;  // ray parameter; equals camera-frame depth for unit-z directions
  Vec3 point = Vec3::Zero();
};

/// Deformed, end-capped tube around a sinusoidal centerline.
class Scene {
 public:
  Scene(std::uint64_t seed, const SceneConfig& config);

  const SceneConfig& config() const { return config_; }

  /// Positive inside the cavity, zero on the wall, negative outside.
  double inside(const Vec3& p) const;
  /// Wall radius at axial position z and angle theta (relative to the centerline).
  double wall_radius(double z, double theta) const;
  Vec3 centerline(double z) const;
  Vec3 centerline_tangent(double z) const;
  Vec3 normal(const Vec3& p) const;
  std::array<double, 3> albedo(const Vec3& p) const;

  /// Sphere-traced first hit along origin + t * dir, t > 0.
  RayHit cast(const Vec3& origin, const Vec3& dir) const;

 private:
  double noise(const Vec3& p) const;
  double lattice(int x, int y, int z) const;

  SceneConfig config_;
  std::uint64_t seed_;
  std::array<double, 4> phase_{};
  struct Bump {
    int m;
    double k;
    double phase;
    double amp;
  };
  std::vector<Bump> bumps_;
};

struct Trajectory {
  std::vector<CameraPose> poses;
};

/// Scene plus camera path along the cavity.
struct SceneBundle {
  Scene scene;
  Trajectory trajectory;
};

SceneBundle make_scene(std::uint64_t seed, const SceneConfig& config, std::uint64_t trajectory_seed);
inline SceneBundle make_scene(std::uint64_t seed, const SceneConfig& config) {
  return make_scene(seed, config, seed);
}

/// Default camera: 64x80 with a field of view of roughly 90 degrees.
CameraIntrinsics default_intrinsics(int height = 64, int width = 80);

struct RenderedFrame {
  Image image;
  DepthMap depth;
};

RenderedFrame render_frame(const Scene& scene, const CameraPose& pose, const CameraIntrinsics& K);

/// Shaded intensity of a surface point lit from `camera_center` (no tone mapping).
std::array<double, 3> shade(const Scene& scene, const Vec3& point, const Vec3& camera_center);

struct SfmSimConfig {
  int n_points = 320;
  double noise_sigma = 0.01;
  double dropout = 0.1;
  double max_scale_change = 1.6;  // matching window: distance ratio to the seeding view
  double max_angle_deg = 35.0;    // matching window: viewing-angle change
  double occlusion_tolerance = 1e-3;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SfmSimulation {
  SfmReconstruction recon;
  std::vector<Vec3> true_positions;  // noiseless points, aligned with recon.points
};

SfmSimulation simulate_sfm(const Scene& scene, const Trajectory& trajectory, const CameraIntrinsics& K,
                           const SfmSimConfig& config);

/// Whether `point` is seen unoccluded from a camera (in front, in image, ray not blocked).
bool observes(const Scene& scene, const CameraPose& pose, const CameraIntrinsics& K, const Vec3& point,
              double tolerance);

struct DatasetOptions {
  std::uint64_t seed = 20190220;
  std::uint64_t trajectory_seed = 20190220;
  SceneConfig scene;
  SfmSimConfig sfm;
  int height = 64;
  int width = 80;
};

/// Sets one option by name (the `synth` config keys); unknown keys raise ValidationError.
void apply_setting(DatasetOptions& options, const std::string& key, const std::string& value);
/// Applies every `key = value` line ('#' comments allowed).
void apply_settings_text(DatasetOptions& options, const std::string& text, const std::string& origin);

/// Writes intrinsics/poses/points/visibility, frames/<id>.png and depth_gt/<id>.eda.
void write_dataset(const std::filesystem::path& dir, const DatasetOptions& options);

}  // namespace endodepth::synth
