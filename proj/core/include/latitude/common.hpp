// Shared scalar/vector aliases and the error hierarchy.

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <stdexcept>
#include <string>

namespace latitude {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using VecX = Eigen::VectorXd;
using Mat3 = Eigen::Matrix3d;
using Mat36 = Eigen::Matrix<double, 3, 6>;
using MatX = Eigen::MatrixXd;
using Quat = Eigen::Quaterniond;

template <typename S> using Vec3T = Eigen::Matrix<S, 3, 1>;
template <typename S> using VecXT = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S> using MatXT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Argument outside the mathematical domain of an operation.
struct DomainError : Error {
  using Error::Error;
};

// Mismatched vector/matrix/image dimensions.
struct DimensionError : Error {
  using Error::Error;
};

// NaN/Inf where a finite value is required.
struct NonFiniteError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// A file referenced by a manifest or command line does not exist.
struct MissingFileError : IoError {
  using IoError::IoError;
};

// Malformed text input; carries the 1-based line number when known.
struct ParseError : IoError {
  ParseError(const std::string& what, int line = 0)
      : IoError(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_number(line) {}
  int line_number = 0;
};

inline constexpr double kPi = 3.14159265358979323846;

inline double deg_to_rad(double d) { return d * kPi / 180.0; }
inline double rad_to_deg(double r) { return r * 180.0 / kPi; }

}  // namespace latitude
