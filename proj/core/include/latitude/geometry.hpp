// Rigid transforms, se(3) exponential/log maps, and pose error metrics.
//
// Poses store a unit quaternion plus a translation; twists are 6-vectors
// [rho; phi] with the translational part first. Pose increments compose on
// the left in the world frame, exp(xi) * base, and every gradient in the
// project uses the same convention.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "latitude/common.hpp"

namespace latitude {

struct Twist {
  Vec3 rho = Vec3::Zero();  // translational part (scene units)
  Vec3 phi = Vec3::Zero();  // rotational part (radians)

  Vec6 to_vector() const {
    Vec6 v;
    v << rho, phi;
    return v;
  }
  static Twist from_vector(const Vec6& v) { return {v.head<3>(), v.tail<3>()}; }
};

class Pose {
 public:
  Pose() : rotation_(Quat::Identity()), translation_(Vec3::Zero()) {}

  // Normalizes the quaternion; throws DomainError on a near-zero norm.
  Pose(const Quat& rotation, const Vec3& translation);

  static Pose identity() { return Pose(); }

  const Quat& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  Mat3 rotation_matrix() const { return rotation_.toRotationMatrix(); }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }

  Pose inverse() const {
    const Quat qi = rotation_.conjugate();
    return Pose(qi, -(qi * translation_));
  }

  // Composition: (*this) after other, i.e. result.apply(p) = this->apply(other.apply(p)).
  Pose operator*(const Pose& other) const {
    return Pose(rotation_ * other.rotation_, rotation_ * other.translation_ + translation_);
  }

  // Flips the quaternion sign so w >= 0 (same rotation, canonical form).
  Pose canonicalized() const;

 private:
  Quat rotation_;
  Vec3 translation_;
};

struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0;  // focal lengths, pixels
  double cx = 0.0, cy = 0.0;  // principal point, pixels
  int width = 0, height = 0;

  // Throws DomainError unless fx,fy > 0 and the principal point is inside the image.
  void validate() const;
};

Mat3 skew(const Vec3& v);

// Closed-form exponential map; switches to series expansions below 1e-6
// rotation angle to avoid 0/0 in the Rodrigues and V-matrix terms.
Pose se3_exp(const Twist& xi);

// Inverse of se3_exp. Throws DomainError when the rotation angle is within
// 1e-6 of pi, where the axis is not recoverable.
Twist se3_log(const Pose& t);

// World-frame increment: se3_exp(xi) * base.
Pose apply_increment(const Twist& xi, const Pose& base);

// d(exp(xi) * p)/d(xi) at xi = 0: the 3x6 block [I | -skew(p)].
Mat36 point_jacobian_at_zero(const Vec3& p);

struct PoseError {
  double translation = 0.0;  // scene units
  double rotation_deg = 0.0;
};

// Translation L2 distance and the geodesic angle between rotations (degrees);
// symmetric and invariant to quaternion sign.
PoseError pose_errors(const Pose& estimate, const Pose& truth);

// Text form, one pose per line: tx ty tz qw qx qy qz with 17 significant digits.
std::string format_pose_line(const Pose& pose);
Pose parse_pose_line(const std::string& line, int line_number = 0);
void write_poses(const std::string& path, const std::vector<Pose>& poses);
std::vector<Pose> read_poses(const std::string& path);

}  // namespace latitude
