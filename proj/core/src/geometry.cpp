#include "latitude/geometry.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace latitude {

namespace {
constexpr double kSmallAngle = 1e-6;
}

Pose::Pose(const Quat& rotation, const Vec3& translation)
    : rotation_(rotation), translation_(translation) {
  const double n = rotation_.norm();
  if (!(n > 1e-12) || !std::isfinite(n)) {
    throw DomainError("pose rotation quaternion has invalid norm");
  }
  rotation_.coeffs() /= n;
}

Pose Pose::canonicalized() const {
  Pose p = *this;
  if (p.rotation_.w() < 0.0) p.rotation_.coeffs() = -p.rotation_.coeffs();
  return p;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw DomainError("camera focal lengths must be positive");
  if (!(cx > 0.0) || !(cx < width) || !(cy > 0.0) || !(cy < height)) {
    throw DomainError("camera principal point must lie inside the image");
  }
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
      -v.y(), v.x(), 0.0;
  return s;
}

Pose se3_exp(const Twist& xi) {
  const double theta = xi.phi.norm();
  if (!std::isfinite(theta) || !xi.rho.allFinite()) {
    throw DomainError("se3_exp requires a finite twist");
  }

  Quat q;
  if (theta < kSmallAngle) {
    // sin(t/2)/t ~ 1/2 - t^2/48
    const double f = 0.5 - theta * theta / 48.0;
    q = Quat(std::cos(0.5 * theta), f * xi.phi.x(), f * xi.phi.y(), f * xi.phi.z());
  } else {
    const double half = 0.5 * theta;
    const double f = std::sin(half) / theta;
    q = Quat(std::cos(half), f * xi.phi.x(), f * xi.phi.y(), f * xi.phi.z());
  }
  q.normalize();

  // V = I + B*K + C*K^2 with K = skew(phi).
  const Mat3 K = skew(xi.phi);
  double B, C;
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    B = 0.5 - t2 / 24.0;
    C = 1.0 / 6.0 - t2 / 120.0;
  } else {
    const double t2 = theta * theta;
    B = (1.0 - std::cos(theta)) / t2;
    C = (theta - std::sin(theta)) / (t2 * theta);
  }
  const Mat3 V = Mat3::Identity() + B * K + C * K * K;
  return Pose(q, V * xi.rho);
}

Twist se3_log(const Pose& t) {
  Quat q = t.rotation();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const double sin_half = q.vec().norm();
  const double theta = 2.0 * std::atan2(sin_half, q.w());
  if (theta >= kPi - kSmallAngle) {
    throw DomainError("se3_log undefined for rotation angles at or near pi");
  }

  Vec3 phi;
  if (theta < kSmallAngle) {
    // t/sin(t/2) ~ 2 + t^2/12
    phi = q.vec() * (2.0 + theta * theta / 12.0);
  } else {
    phi = q.vec() * (theta / sin_half);
  }

  const Mat3 K = skew(phi);
  double D;
  if (theta < kSmallAngle) {
    D = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    const double half = 0.5 * theta;
    D = (1.0 - half * std::cos(half) / std::sin(half)) / (theta * theta);
  }
  const Mat3 Vinv = Mat3::Identity() - 0.5 * K + D * K * K;
  return Twist{Vinv * t.translation(), phi};
}

Pose apply_increment(const Twist& xi, const Pose& base) { return se3_exp(xi) * base; }

Mat36 point_jacobian_at_zero(const Vec3& p) {
  Mat36 j;
  j.leftCols<3>() = Mat3::Identity();
  j.rightCols<3>() = -skew(p);
  return j;
}

PoseError pose_errors(const Pose& estimate, const Pose& truth) {
  PoseError e;
  e.translation = (estimate.translation() - truth.translation()).norm();
  const Quat rel = estimate.rotation().conjugate() * truth.rotation();
  const double angle = 2.0 * std::atan2(rel.vec().norm(), std::abs(rel.w()));
  e.rotation_deg = rad_to_deg(angle);
  return e;
}

std::string format_pose_line(const Pose& pose) {
  const Vec3& t = pose.translation();
  const Quat& q = pose.rotation();
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g %.17g %.17g %.17g",
                t.x(), t.y(), t.z(), q.w(), q.x(), q.y(), q.z());
  return buf;
}

Pose parse_pose_line(const std::string& line, int line_number) {
  std::istringstream ss(line);
  double v[7];
  for (double& x : v) {
    if (!(ss >> x)) throw ParseError("malformed pose line: '" + line + "'", line_number);
  }
  std::string trailing;
  if (ss >> trailing) throw ParseError("trailing tokens on pose line", line_number);
  try {
    return Pose(Quat(v[3], v[4], v[5], v[6]), Vec3(v[0], v[1], v[2]));
  } catch (const DomainError& e) {
    throw ParseError(std::string(e.what()), line_number);
  }
}

void write_poses(const std::string& path, const std::vector<Pose>& poses) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const Pose& p : poses) out << format_pose_line(p) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

std::vector<Pose> read_poses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open pose file: " + path);
  std::vector<Pose> poses;
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    poses.push_back(parse_pose_line(line, line_number));
  }
  return poses;
}

}  // namespace latitude
