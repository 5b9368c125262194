#pragma once

// Euler-discretized unicycle in input-affine form x+ = a(x) + B(x) u.

#include "types.hpp"

namespace blendmpc {

struct DynamicsConfig
{
  double ts{0.1};  ///< sampling period [s]

  void validate() const
  {
    if (!(ts > 0.0) || !std::isfinite(ts)) throw std::invalid_argument("DynamicsConfig.ts must be > 0");
  }
};

/// Drift term a(x). The kinematic model has no drift beyond holding the pose.
inline RobotState drift(const RobotState & x) { return x; }

/// B(x) = [[ts cos(yaw), 0], [ts sin(yaw), 0], [0, ts]].
inline Mat32 input_matrix(const RobotState & x, double ts)
{
  Mat32 B;
  B << ts * std::cos(x.yaw), 0.0, ts * std::sin(x.yaw), 0.0, 0.0, ts;
  return B;
}

/// a(x) + B(x) u without yaw canonicalization. Used inside the transcription,
/// where yaw is carried continuously across the horizon.
inline Vec3 step_raw(const RobotState & x, const VelocityCommand & u, double ts)
{
  return drift(x).vec() + input_matrix(x, ts) * u.vec();
}

inline RobotState step(const RobotState & x, const VelocityCommand & u, const DynamicsConfig & cfg)
{
  return RobotState::from(step_raw(x, u, cfg.ts)).canonical();
}

/// d step_raw / dx.
inline Mat3 step_jacobian_state(const RobotState & x, const VelocityCommand & u, double ts)
{
  Mat3 J = Mat3::Identity();
  J(0, 2) = -ts * u.v * std::sin(x.yaw);
  J(1, 2) = ts * u.v * std::cos(x.yaw);
  return J;
}

}  // namespace blendmpc
