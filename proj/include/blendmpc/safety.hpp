#pragma once

// Distance-based barrier h_l(x) = |p - o_l| - d_th and the one-step CBF
// residual psi(x, u) = h(step(x, u)) - h(x) + gamma * h(x). The control
// input satisfies the discrete-time CBF condition iff every psi_l >= 0.

#include "dynamics.hpp"

namespace blendmpc {

struct BarrierConfig
{
  double gamma{0.1};  ///< linear class-K gain, gamma(s) = gamma * s
  double d_th{0.5};   ///< keep-out distance used when building obstacle sets

  void validate() const
  {
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("BarrierConfig.gamma must lie in (0, 1)");
    if (!(d_th > 0.0)) throw std::invalid_argument("BarrierConfig.d_th must be > 0");
  }
};

inline Eigen::VectorXd h_values(const RobotState & x, const ObstacleSet & obs)
{
  Eigen::VectorXd h(static_cast<Eigen::Index>(obs.size()));
  const Vec2 p = x.position();
  for (std::size_t l = 0; l < obs.size(); ++l) h[static_cast<Eigen::Index>(l)] = (p - obs.centers[l]).norm() - obs.d_th;
  return h;
}

inline bool is_safe(const RobotState & x, const ObstacleSet & obs)
{
  const Eigen::VectorXd h = h_values(x, obs);
  return h.size() == 0 || h.minCoeff() >= 0.0;
}

inline Eigen::VectorXd psi(
  const RobotState & x, const VelocityCommand & u, const ObstacleSet & obs, const BarrierConfig & bcfg,
  const DynamicsConfig & dcfg)
{
  const Eigen::VectorXd h0 = h_values(x, obs);
  const Eigen::VectorXd h1 = h_values(step(x, u, dcfg), obs);
  return h1 - h0 + bcfg.gamma * h0;
}

/// psi with its Jacobians for the transcription. Distances are smoothed as
/// sqrt(d^2 + eps) so the gradient stays finite at obstacle centers.
struct CbfEval
{
  Eigen::VectorXd value;
  Eigen::Matrix<double, Eigen::Dynamic, 3> d_x;
  Eigen::Matrix<double, Eigen::Dynamic, 2> d_u;
};

inline CbfEval evaluate_cbf(
  const RobotState & x, const VelocityCommand & u, const ObstacleSet & obs, double gamma, double ts,
  double eps = 1e-12)
{
  const auto n = static_cast<Eigen::Index>(obs.size());
  CbfEval out{Eigen::VectorXd(n), Eigen::Matrix<double, Eigen::Dynamic, 3>(n, 3),
              Eigen::Matrix<double, Eigen::Dynamic, 2>(n, 2)};
  const double c = std::cos(x.yaw), s = std::sin(x.yaw);
  const Vec2 p0 = x.position();
  const Vec2 p1{x.px + ts * u.v * c, x.py + ts * u.v * s};
  for (Eigen::Index l = 0; l < n; ++l) {
    const Vec2 & o = obs.centers[static_cast<std::size_t>(l)];
    const Vec2 r0 = p0 - o, r1 = p1 - o;
    const double n0 = std::sqrt(r0.squaredNorm() + eps), n1 = std::sqrt(r1.squaredNorm() + eps);
    out.value[l] = (n1 - obs.d_th) - (1.0 - gamma) * (n0 - obs.d_th);
    const Vec2 g1 = r1 / n1, g0 = r0 / n0;
    out.d_x(l, 0) = g1.x() - (1.0 - gamma) * g0.x();
    out.d_x(l, 1) = g1.y() - (1.0 - gamma) * g0.y();
    out.d_x(l, 2) = g1.x() * (-ts * u.v * s) + g1.y() * (ts * u.v * c);
    out.d_u(l, 0) = ts * (g1.x() * c + g1.y() * s);
    out.d_u(l, 1) = 0.0;
  }
  return out;
}

}  // namespace blendmpc
