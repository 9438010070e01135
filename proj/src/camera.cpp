#include "endodepth/camera.hpp"

#include <cmath>
#include <string>

#include "endodepth/errors.hpp"

namespace endodepth {

Mat3 CameraIntrinsics::matrix() const {
  Mat3 k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

Mat3 CameraIntrinsics::inverse_matrix() const {
  Mat3 k;
  k << 1.0 / fx, 0.0, -cx / fx, 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0;
  return k;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) {
    throw ValidationError("intrinsics: focal lengths must be positive");
  }
  if (width < 8 || height < 8) {
    throw ValidationError("intrinsics: image must be at least 8x8, got " +
                          std::to_string(width) + "x" + std::to_string(height));
  }
  if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
    throw ValidationError("intrinsics: principal point outside the image");
  }
}

CameraPose CameraPose::from_quaternion(const Eigen::Quaterniond& q, const Vec3& t) {
  CameraPose pose;
  pose.rotation = q.normalized().toRotationMatrix();
  pose.translation = t;
  return pose;
}

Eigen::Quaterniond CameraPose::quaternion() const {
  Eigen::Quaterniond q(rotation);
  q.normalize();
  // Canonical hemisphere so that written files are stable.
  if (q.w() < 0.0) q.coeffs() *= -1.0;
  return q;
}

void CameraPose::validate() const {
  if (!rotation.allFinite() || !translation.allFinite()) {
    throw ValidationError("pose: non-finite entries");
  }
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (ortho > 1e-6) {
    throw ValidationError("pose: rotation is not orthonormal (deviation " + std::to_string(ortho) +
                          ")");
  }
  const double det = rotation.determinant();
  if (std::abs(det - 1.0) > 1e-6) {
    throw ValidationError("pose: rotation determinant is " + std::to_string(det));
  }
}

RelativeTransform RelativeTransform::inverse() const {
  RelativeTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  inv.source_frame = target_frame;
  inv.target_frame = source_frame;
  return inv;
}

RelativeTransform RelativeTransform::then(const RelativeTransform& other) const {
  RelativeTransform out;
  out.rotation = other.rotation * rotation;
  out.translation = other.rotation * translation + other.translation;
  out.source_frame = source_frame;
  out.target_frame = other.target_frame;
  return out;
}

RelativeTransform RelativeTransform::identity(int frame) {
  RelativeTransform id;
  id.source_frame = frame;
  id.target_frame = frame;
  return id;
}

RelativeTransform relative_transform(const CameraPose& pose_j, const CameraPose& pose_k,
                                     int frame_j, int frame_k) {
  RelativeTransform rel;
  rel.rotation = pose_k.rotation * pose_j.rotation.transpose();
  rel.translation = pose_k.translation - rel.rotation * pose_j.translation;
  rel.source_frame = frame_j;
  rel.target_frame = frame_k;
  return rel;
}

Projection project_point(const CameraIntrinsics& intrinsics, const CameraPose& pose,
                         const Vec3& world) {
  const Vec3 cam = pose.apply(world);
  const double z = cam.z();
  if (std::abs(z) < 1e-12) {
    throw NumericalError("project_point: point lies on the camera plane");
  }
  Projection p;
  p.z = z;
  p.u = intrinsics.fx * (cam.x() / z) + intrinsics.cx;
  p.v = intrinsics.fy * (cam.y() / z) + intrinsics.cy;
  return p;
}

bool rounded_pixel(const CameraIntrinsics& intrinsics, double u, double v, int& col, int& row) {
  if (!std::isfinite(u) || !std::isfinite(v)) return false;
  const double ru = std::nearbyint(u);
  const double rv = std::nearbyint(v);
  if (ru < 0.0 || rv < 0.0 || ru > intrinsics.width - 1 || rv > intrinsics.height - 1) {
    return false;
  }
  col = static_cast<int>(ru);
  row = static_cast<int>(rv);
  return true;
}

}  // namespace endodepth
