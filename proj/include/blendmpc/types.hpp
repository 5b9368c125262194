#pragma once

// Core value types shared by every module: planar pose, velocity command,
// goal pose, obstacle set, and the error hierarchy.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace blendmpc {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat32 = Eigen::Matrix<double, 3, 2>;
using Mat23 = Eigen::Matrix<double, 2, 3>;

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a)
{
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::remainder(a, two_pi);
  if (r <= -std::numbers::pi) r += two_pi;
  return r;
}

/// Shortest signed angular difference a - b.
inline double angle_diff(double a, double b) { return wrap_angle(a - b); }

struct RobotState
{
  double px{0.0};
  double py{0.0};
  double yaw{0.0};

  Vec3 vec() const { return {px, py, yaw}; }
  Vec2 position() const { return {px, py}; }
  static RobotState from(const Vec3 & v) { return {v.x(), v.y(), v.z()}; }

  RobotState canonical() const { return {px, py, wrap_angle(yaw)}; }
  bool finite() const { return std::isfinite(px) && std::isfinite(py) && std::isfinite(yaw); }

  friend bool operator==(const RobotState &, const RobotState &) = default;
};

struct VelocityCommand
{
  double v{0.0};
  double omega{0.0};

  Vec2 vec() const { return {v, omega}; }
  static VelocityCommand from(const Vec2 & u) { return {u.x(), u.y()}; }
  bool finite() const { return std::isfinite(v) && std::isfinite(omega); }

  friend bool operator==(const VelocityCommand &, const VelocityCommand &) = default;
};

struct GoalPose
{
  double gx{0.0};
  double gy{0.0};
  double gyaw{0.0};

  Vec3 vec() const { return {gx, gy, gyaw}; }
  Vec2 position() const { return {gx, gy}; }

  friend bool operator==(const GoalPose &, const GoalPose &) = default;
};

/// Static point obstacles with a shared keep-out distance measured center to center.
struct ObstacleSet
{
  std::vector<Vec2> centers;
  double d_th{0.5};

  std::size_t size() const { return centers.size(); }
  bool empty() const { return centers.empty(); }
};

/// Symmetric input box [-v_max, v_max] x [-omega_max, omega_max].
struct InputBox
{
  double v_max{0.4};
  double omega_max{0.8};

  VelocityCommand clamp(const VelocityCommand & u) const
  {
    return {std::clamp(u.v, -v_max, v_max), std::clamp(u.omega, -omega_max, omega_max)};
  }
  bool contains(const VelocityCommand & u, double tol = 0.0) const
  {
    return std::abs(u.v) <= v_max + tol && std::abs(u.omega) <= omega_max + tol;
  }
};

// Errors. Each maps to one named failure mode of an operation.
struct DomainError : std::domain_error
{
  using std::domain_error::domain_error;
};
struct ConvergenceError : std::runtime_error
{
  using std::runtime_error::runtime_error;
};
struct DegenerateDistribution : std::runtime_error
{
  using std::runtime_error::runtime_error;
};
struct SingularJacobian : std::runtime_error
{
  using std::runtime_error::runtime_error;
};
struct SolverFailure : std::runtime_error
{
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error
{
  using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error
{
  using std::runtime_error::runtime_error;
};
struct EmptyTrace : std::runtime_error
{
  using std::runtime_error::runtime_error;
};

namespace detail {

// Uniform double in [0, 1) from the top 53 bits; stable across standard libraries.
inline double uniform01(std::mt19937_64 & rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace detail

}  // namespace blendmpc
