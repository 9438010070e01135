#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace endodepth {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole intrinsics. `u` indexes columns in [0, W-1], `v` rows in [0, H-1].
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 8;
  int height = 8;

  /// K = [[fx,0,cx],[0,fy,cy],[0,0,1]]
  Mat3 matrix() const;
  Mat3 inverse_matrix() const;

  /// Throws ValidationError when fx, fy, the principal point or the image
  /// size are out of range.
  void validate() const;

  bool operator==(const CameraIntrinsics&) const = default;
};

/// World-to-camera rigid map: p_cam = rotation * p_world + translation.
struct CameraPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static CameraPose from_quaternion(const Eigen::Quaterniond& q, const Vec3& t);
  Eigen::Quaterniond quaternion() const;

  Vec3 apply(const Vec3& world) const { return rotation * world + translation; }
  /// Camera centre in world coordinates.
  Vec3 center() const { return -rotation.transpose() * translation; }

  /// Orthonormality and det = +1, both within 1e-6.
  void validate() const;
};

/// Maps frame-j camera coordinates into frame-k camera coordinates:
/// p_k = rotation * p_j + translation.
struct RelativeTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  int source_frame = -1;
  int target_frame = -1;

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RelativeTransform inverse() const;
  /// (other ∘ this): first this, then other.
  RelativeTransform then(const RelativeTransform& other) const;

  static RelativeTransform identity(int frame = -1);
};

RelativeTransform relative_transform(const CameraPose& pose_j, const CameraPose& pose_k,
                                     int frame_j = -1, int frame_k = -1);

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double z = 0.0;
};

/// Transforms a world point into the camera and applies K. The returned
/// depth may be non-positive; callers decide visibility.
/// Throws NumericalError when |z| < 1e-12.
Projection project_point(const CameraIntrinsics& intrinsics, const CameraPose& pose,
                         const Vec3& world);

/// Rounded pixel of a projection, ties to even. Returns false when the
/// rounded pixel falls outside the image.
bool rounded_pixel(const CameraIntrinsics& intrinsics, double u, double v, int& col, int& row);

}  // namespace endodepth
