#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace pourplan {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Pose = Eigen::Isometry3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using RowVecX = Eigen::RowVectorXd;

inline constexpr const char* kVersion = "0.1.0";

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kHalfPi = std::numbers::pi / 2.0;

/// Gravitational acceleration magnitude (m/s^2). Gravity points along world -z.
inline constexpr double kGravity = 9.81;

inline constexpr double deg2rad(double deg) { return deg * kPi / 180.0; }
inline constexpr double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: bad files, violated preconditions, invalid shapes.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A numerical procedure could not produce a result.
class ComputeError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InputError(what);
}

/// Rotation about world z by phi.
inline Mat3 rot_z(double phi) {
  return Eigen::AngleAxisd(phi, Vec3::UnitZ()).toRotationMatrix();
}

/// Rotation about y by theta; maps +z to (sin theta, 0, cos theta).
inline Mat3 rot_y(double theta) {
  return Eigen::AngleAxisd(theta, Vec3::UnitY()).toRotationMatrix();
}

/// 2D counterpart of rot_y acting on (x, up) pairs: (0,1) -> (sin, cos).
inline Vec2 tilt2(double theta, const Vec2& local) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * local.x() + s * local.y(), -s * local.x() + c * local.y()};
}

/// Inverse of tilt2.
inline Vec2 untilt2(double theta, const Vec2& world) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * world.x() - s * world.y(), s * world.x() + c * world.y()};
}

}  // namespace pourplan
