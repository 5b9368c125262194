#pragma once

// Parameterized human action-value model.
//
//   Q(x, uH, theta) = |f(x,uH) - g|^2_{M(theta1)} + |uH|^2_{M(theta2)}
//                     - theta3 * sum_l ln(|p(x,uH) - o_l|^2 / d_th^2)
//
// where p is the predicted planar position after one step. The stationarity
// residual phi is the exact gradient dQ/duH, so phi = 0 characterizes the
// rational (Q-minimizing) action.

#include <cstdint>
#include <limits>
#include <optional>
#include <random>

#include "dynamics.hpp"

namespace blendmpc {

using Vec5 = Eigen::Matrix<double, 5, 1>;
using Mat25 = Eigen::Matrix<double, 2, 5>;

struct IntentParams
{
  static constexpr double epsilon = 1e-3;

  double theta1_x{0.4};
  double theta1_y{0.4};
  double theta1_yaw{5.0};
  double theta2{2.0};
  double theta3{2.0};

  /// Four-parameter form with the x/y goal weights tied.
  static IntentParams tied(double theta1_xy, double theta1_yaw, double theta2, double theta3)
  {
    IntentParams p{theta1_xy, theta1_xy, theta1_yaw, theta2, theta3};
    p.validate();
    return p;
  }
  static IntentParams untied(double t1x, double t1y, double t1yaw, double theta2, double theta3)
  {
    IntentParams p{t1x, t1y, t1yaw, theta2, theta3};
    p.validate();
    return p;
  }

  Vec5 vec() const
  {
    Vec5 v;
    v << theta1_x, theta1_y, theta1_yaw, theta2, theta3;
    return v;
  }
  static IntentParams from(const Vec5 & v) { return {v[0], v[1], v[2], v[3], v[4]}; }

  Mat3 m1() const { return Vec3(theta1_x, theta1_y, theta1_yaw).asDiagonal(); }
  Mat2 m2() const { return Vec2(theta2, theta2).asDiagonal(); }

  void validate() const
  {
    const Vec5 v = vec();
    for (int i = 0; i < 5; ++i) {
      if (!std::isfinite(v[i]) || v[i] < epsilon) {
        throw std::invalid_argument("IntentParams component " + std::to_string(i) + " must be finite and >= 1e-3");
      }
    }
  }

  friend bool operator==(const IntentParams &, const IntentParams &) = default;
};

struct RationalityCoefficient
{
  double beta{50.0};
};

/// Evaluation of phi together with its Jacobians at one (x, uH, theta).
struct StationarityEval
{
  Vec2 phi;
  Mat2 d_u;      ///< dphi/duH
  Mat23 d_x;     ///< dphi/dx
  Mat25 d_theta; ///< dphi/dtheta
};

namespace detail {

// Planar position after one step under command u.
inline Vec2 predicted_position(const RobotState & x, const VelocityCommand & u, double ts)
{
  return {x.px + ts * u.v * std::cos(x.yaw), x.py + ts * u.v * std::sin(x.yaw)};
}

// Squared distance with the log-singularity policy: strict throws, otherwise clamp.
inline double barrier_sq_distance(const Vec2 & r, std::optional<double> clamp_floor)
{
  const double d2 = r.squaredNorm();
  if (clamp_floor) return std::max(d2, *clamp_floor);
  if (!(d2 > 0.0)) throw DomainError("predicted position coincides with an obstacle center");
  return d2;
}

}  // namespace detail

/// Goal error of the one-step prediction; the yaw entry is the shortest-angle difference.
inline Vec3 goal_error(const RobotState & x, const VelocityCommand & u, const GoalPose & g, double ts)
{
  const Vec3 next = step_raw(x, u, ts);
  return {next.x() - g.gx, next.y() - g.gy, angle_diff(next.z(), g.gyaw)};
}

inline double q_value(
  const RobotState & x, const VelocityCommand & uH, const IntentParams & theta, const GoalPose & goal,
  const ObstacleSet & obs, const DynamicsConfig & cfg)
{
  const Vec3 e = goal_error(x, uH, goal, cfg.ts);
  const Vec2 u = uH.vec();
  double q = e.dot(theta.m1() * e) + u.dot(theta.m2() * u);
  const Vec2 p = detail::predicted_position(x, uH, cfg.ts);
  const double dth2 = obs.d_th * obs.d_th;
  for (const auto & o : obs.centers) {
    const double d2 = detail::barrier_sq_distance(p - o, std::nullopt);
    q -= theta.theta3 * std::log(d2 / dth2);
  }
  return q;
}

/// phi and all of its Jacobians. With clamp_floor set, squared distances are
/// floored instead of raising DomainError (used by the transcription).
inline StationarityEval evaluate_stationarity(
  const RobotState & x, const VelocityCommand & uH, const IntentParams & theta, const GoalPose & goal,
  const ObstacleSet & obs, const DynamicsConfig & cfg, std::optional<double> clamp_floor = std::nullopt)
{
  const double ts = cfg.ts;
  const double c = std::cos(x.yaw), s = std::sin(x.yaw);
  const Mat32 B = input_matrix(x, ts);
  Mat32 dB;  // dB/dyaw
  dB << -ts * s, 0.0, ts * c, 0.0, 0.0, 0.0;
  const Mat3 M1 = theta.m1();
  const Mat2 M2 = theta.m2();
  const Vec2 u = uH.vec();
  const Vec3 e = goal_error(x, uH, goal, ts);

  // de/dx = I + (dB/dyaw u) e_yaw^T
  const Vec3 dB_u = dB * u;
  Mat3 de_dx = Mat3::Identity();
  de_dx.col(2) += dB_u;

  StationarityEval out;
  // Half-gradient accumulators; scaled by 2 at the end.
  Vec2 g = B.transpose() * M1 * e + M2 * u;
  Mat2 gu = B.transpose() * M1 * B + M2;
  Mat23 gx = B.transpose() * M1 * de_dx;
  gx.col(2) += dB.transpose() * M1 * e;
  Mat25 gt = Mat25::Zero();
  for (int i = 0; i < 3; ++i) gt.col(i) = B.row(i).transpose() * e[i];
  gt.col(3) = u;

  const Eigen::Matrix2d Bxy = B.topRows<2>();
  const Eigen::Matrix2d dBxy = dB.topRows<2>();
  Eigen::Matrix<double, 2, 3> dr_dx = Eigen::Matrix<double, 2, 3>::Zero();
  dr_dx.leftCols<2>().setIdentity();
  dr_dx.col(2) = dB_u.head<2>();

  const Vec2 p = detail::predicted_position(x, uH, ts);
  Vec2 barrier_sum = Vec2::Zero();
  for (const auto & o : obs.centers) {
    const Vec2 r = p - o;
    const double d2 = detail::barrier_sq_distance(r, clamp_floor);
    const Vec2 rn = r / d2;
    const Mat2 G = Mat2::Identity() / d2 - 2.0 * r * r.transpose() / (d2 * d2);
    barrier_sum += Bxy.transpose() * rn;
    gu -= theta.theta3 * Bxy.transpose() * G * Bxy;
    gx -= theta.theta3 * Bxy.transpose() * G * dr_dx;
    gx.col(2) -= theta.theta3 * dBxy.transpose() * rn;
  }
  g -= theta.theta3 * barrier_sum;
  gt.col(4) = -barrier_sum;

  out.phi = 2.0 * g;
  out.d_u = 2.0 * gu;
  out.d_x = 2.0 * gx;
  out.d_theta = 2.0 * gt;
  return out;
}

inline Vec2 phi_residual(
  const RobotState & x, const VelocityCommand & uH, const IntentParams & theta, const GoalPose & goal,
  const ObstacleSet & obs, const DynamicsConfig & cfg)
{
  return evaluate_stationarity(x, uH, theta, goal, obs, cfg).phi;
}

inline Mat2 phi_jacobian_u(
  const RobotState & x, const VelocityCommand & uH, const IntentParams & theta, const GoalPose & goal,
  const ObstacleSet & obs, const DynamicsConfig & cfg)
{
  return evaluate_stationarity(x, uH, theta, goal, obs, cfg).d_u;
}

inline Mat25 phi_jacobian_theta(
  const RobotState & x, const VelocityCommand & uH, const IntentParams & theta, const GoalPose & goal,
  const ObstacleSet & obs, const DynamicsConfig & cfg)
{
  return evaluate_stationarity(x, uH, theta, goal, obs, cfg).d_theta;
}

inline Mat23 phi_jacobian_x(
  const RobotState & x, const VelocityCommand & uH, const IntentParams & theta, const GoalPose & goal,
  const ObstacleSet & obs, const DynamicsConfig & cfg)
{
  return evaluate_stationarity(x, uH, theta, goal, obs, cfg).d_x;
}

struct RationalSolveOptions
{
  double tolerance{1e-8};
  int max_iterations{50};
  int max_halvings{40};
};

struct RationalSolveResult
{
  VelocityCommand u;
  int iterations{0};
  double residual_norm{0.0};
};

namespace detail {

inline bool in_barrier_domain(const RobotState & x, const VelocityCommand & u, const ObstacleSet & obs, double ts)
{
  const Vec2 p = predicted_position(x, u, ts);
  for (const auto & o : obs.centers) {
    if (!((p - o).squaredNorm() > 0.0)) return false;
  }
  return true;
}

}  // namespace detail

/// Damped Newton on phi(x, uH, theta) = 0 starting from u0.
inline RationalSolveResult solve_rational_action_detailed(
  const RobotState & x, const IntentParams & theta, const GoalPose & goal, const ObstacleSet & obs,
  const DynamicsConfig & cfg, const VelocityCommand & u0, const RationalSolveOptions & opt = {})
{
  VelocityCommand u = u0;
  if (!u.finite() || !detail::in_barrier_domain(x, u, obs, cfg.ts)) {
    u = VelocityCommand{};
    if (!detail::in_barrier_domain(x, u, obs, cfg.ts)) {
      u = VelocityCommand{1e-3, 0.0};
      if (!detail::in_barrier_domain(x, u, obs, cfg.ts)) throw DomainError("no feasible start for rational action");
    }
  }

  StationarityEval ev = evaluate_stationarity(x, u, theta, goal, obs, cfg);
  double norm = ev.phi.norm();
  for (int it = 0; it <= opt.max_iterations; ++it) {
    if (norm < opt.tolerance) return {u, it, norm};
    if (it == opt.max_iterations) break;

    Eigen::FullPivLU<Mat2> lu(ev.d_u);
    Vec2 step;
    if (lu.isInvertible()) {
      step = -lu.solve(ev.phi);
    } else {
      step = -ev.phi;
    }

    double alpha = 1.0;
    bool accepted = false;
    for (int h = 0; h < opt.max_halvings; ++h, alpha *= 0.5) {
      const VelocityCommand trial = VelocityCommand::from(u.vec() + alpha * step);
      if (!detail::in_barrier_domain(x, trial, obs, cfg.ts)) continue;
      StationarityEval tev = evaluate_stationarity(x, trial, theta, goal, obs, cfg);
      const double tn = tev.phi.norm();
      if (std::isfinite(tn) && tn < norm) {
        u = trial;
        ev = tev;
        norm = tn;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }
  throw ConvergenceError("rational action residual " + std::to_string(norm) + " above tolerance");
}

inline VelocityCommand solve_rational_action(
  const RobotState & x, const IntentParams & theta, const GoalPose & goal, const ObstacleSet & obs,
  const DynamicsConfig & cfg, const VelocityCommand & u0 = {})
{
  return solve_rational_action_detailed(x, theta, goal, obs, cfg, u0).u;
}

/// Grid discretization of the admissible input box used by the Boltzmann sampler.
struct ActionGrid
{
  InputBox box{};
  int cells_per_axis{41};

  double v_at(int i) const { return -box.v_max + 2.0 * box.v_max * i / (cells_per_axis - 1); }
  double omega_at(int j) const { return -box.omega_max + 2.0 * box.omega_max * j / (cells_per_axis - 1); }
};

/// Unnormalized Boltzmann weights exp(-beta (Q - Q_min)) on the grid, row-major in (v, omega).
/// Cells whose prediction lands on an obstacle center get weight 0.
inline std::vector<double> boltzmann_weights(
  const RobotState & x, const IntentParams & theta, RationalityCoefficient beta, const GoalPose & goal,
  const ObstacleSet & obs, const DynamicsConfig & cfg, const ActionGrid & grid = {})
{
  const int n = grid.cells_per_axis;
  std::vector<double> q(static_cast<std::size_t>(n * n), std::numeric_limits<double>::infinity());
  double qmin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const VelocityCommand u{grid.v_at(i), grid.omega_at(j)};
      if (!detail::in_barrier_domain(x, u, obs, cfg.ts)) continue;
      const double qv = q_value(x, u, theta, goal, obs, cfg);
      if (!std::isfinite(qv)) continue;
      q[static_cast<std::size_t>(i * n + j)] = qv;
      qmin = std::min(qmin, qv);
    }
  }
  if (!std::isfinite(qmin)) throw DegenerateDistribution("every grid cell is outside the barrier domain");
  std::vector<double> w(q.size(), 0.0);
  for (std::size_t k = 0; k < q.size(); ++k) {
    if (std::isfinite(q[k])) w[k] = std::exp(-beta.beta * (q[k] - qmin));
  }
  return w;
}

inline VelocityCommand sample_boltzmann_action(
  const RobotState & x, const IntentParams & theta, RationalityCoefficient beta, const GoalPose & goal,
  const ObstacleSet & obs, const DynamicsConfig & cfg, std::uint64_t rng_seed, const ActionGrid & grid = {})
{
  if (beta.beta < 0.0) throw std::invalid_argument("beta must be >= 0");
  const auto w = boltzmann_weights(x, theta, beta, goal, obs, cfg, grid);
  double total = 0.0;
  for (double wi : w) total += wi;

  std::mt19937_64 rng(rng_seed);
  const double target = detail::uniform01(rng) * total;
  double acc = 0.0;
  std::size_t pick = 0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (w[k] <= 0.0) continue;
    pick = k;
    acc += w[k];
    if (acc > target) break;
  }
  const int n = grid.cells_per_axis;
  return {grid.v_at(static_cast<int>(pick) / n), grid.omega_at(static_cast<int>(pick) % n)};
}

}  // namespace blendmpc
