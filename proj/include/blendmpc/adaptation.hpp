#pragma once

// Online projected-gradient adaptation of the human intent parameters.
//
// J(theta) = 1/2 (uH_pred - uH_meas)' Gamma (uH_pred - uH_meas), where uH_pred
// depends on theta through phi(x, uH_pred, theta) = 0. By the implicit function
// theorem d uH_pred / d theta = -phi_u^{-1} phi_theta, so
//
//   grad J = -phi_theta' phi_u^{-T} Gamma (uH_pred - uH_meas).

#include <string_view>

#include "human_model.hpp"

namespace blendmpc {

enum class SkipReason { none, deadband, singular_jacobian, domain_error, not_stationary };

inline std::string_view to_string(SkipReason r)
{
  switch (r) {
    case SkipReason::none: return "none";
    case SkipReason::deadband: return "deadband";
    case SkipReason::singular_jacobian: return "singular_jacobian";
    case SkipReason::domain_error: return "domain_error";
    case SkipReason::not_stationary: return "not_stationary";
  }
  return "none";
}

struct AdaptationConfig
{
  Vec2 gamma_weight{0.01, 0.01};
  double mu{1.0};
  Vec5 theta_lower = Vec5::Constant(1e-3);
  Vec5 theta_upper = Vec5::Constant(100.0);
  double v_dead{0.02};
  double omega_dead{0.04};
  double conditioning_limit{1e8};
  double stationarity_tolerance{1e-4};
  bool tied{true};  ///< keep theta1_x == theta1_y

  void validate() const
  {
    if (!(mu > 0.0)) throw std::invalid_argument("AdaptationConfig.mu must be > 0");
    if (!(gamma_weight.minCoeff() >= 0.0)) throw std::invalid_argument("AdaptationConfig.gamma_weight must be >= 0");
    for (int i = 0; i < 5; ++i) {
      if (!(theta_lower[i] >= IntentParams::epsilon)) throw std::invalid_argument("AdaptationConfig.theta_lower must be >= 1e-3");
      if (!(theta_lower[i] <= theta_upper[i])) throw std::invalid_argument("AdaptationConfig.theta_lower must not exceed theta_upper");
    }
  }
};

struct AdaptationRecord
{
  IntentParams theta_before;
  IntentParams theta_after;
  VelocityCommand predicted;
  VelocityCommand measured;
  double cost_J{0.0};
  bool skipped{false};
  SkipReason skip_reason{SkipReason::none};
};

inline double prediction_cost(const VelocityCommand & predicted, const VelocityCommand & measured, const AdaptationConfig & cfg)
{
  const Vec2 e = predicted.vec() - measured.vec();
  return 0.5 * e.dot(cfg.gamma_weight.cwiseProduct(e));
}

/// @throws SingularJacobian when cond(phi_u) exceeds cfg.conditioning_limit.
/// @throws DomainError at the log singularity.
inline Vec5 theta_gradient(
  const RobotState & x, const VelocityCommand & uH_pred, const VelocityCommand & uH_meas, const IntentParams & theta,
  const GoalPose & goal, const ObstacleSet & obs, const DynamicsConfig & dcfg, const AdaptationConfig & acfg)
{
  const StationarityEval ev = evaluate_stationarity(x, uH_pred, theta, goal, obs, dcfg);
  Eigen::JacobiSVD<Mat2> svd(ev.d_u);
  const Vec2 sv = svd.singularValues();
  if (!ev.d_u.allFinite() || !(sv[1] > 0.0) || sv[0] / sv[1] > acfg.conditioning_limit) {
    throw SingularJacobian("dphi/duH condition number exceeds the limit");
  }
  const Vec2 r = acfg.gamma_weight.cwiseProduct(uH_pred.vec() - uH_meas.vec());
  const Vec2 w = ev.d_u.transpose().partialPivLu().solve(r);
  return -ev.d_theta.transpose() * w;
}

/// Gradient step followed by projection onto the parameter box.
inline IntentParams pgd_step(const IntentParams & theta, const Vec5 & grad, const AdaptationConfig & cfg)
{
  Vec5 eta = theta.vec() - cfg.mu * grad;
  if (cfg.tied) eta[0] = eta[1] = 0.5 * (eta[0] + eta[1]);
  eta = eta.cwiseMax(cfg.theta_lower).cwiseMin(cfg.theta_upper);
  return IntentParams::from(eta);
}

inline AdaptationRecord update(
  const IntentParams & theta, const RobotState & x, const VelocityCommand & uH_pred, const VelocityCommand & uH_meas,
  const GoalPose & goal, const ObstacleSet & obs, const DynamicsConfig & dcfg, const AdaptationConfig & acfg)
{
  AdaptationRecord rec{theta, theta, uH_pred, uH_meas, prediction_cost(uH_pred, uH_meas, acfg), true, SkipReason::none};
  if (std::abs(uH_meas.v) <= acfg.v_dead && std::abs(uH_meas.omega) <= acfg.omega_dead) {
    rec.skip_reason = SkipReason::deadband;
    return rec;
  }
  try {
    if (!(phi_residual(x, uH_pred, theta, goal, obs, dcfg).norm() <= acfg.stationarity_tolerance)) {
      rec.skip_reason = SkipReason::not_stationary;
      return rec;
    }
    const Vec5 g = theta_gradient(x, uH_pred, uH_meas, theta, goal, obs, dcfg, acfg);
    rec.theta_after = pgd_step(theta, g, acfg);
  } catch (const SingularJacobian &) {
    rec.skip_reason = SkipReason::singular_jacobian;
    return rec;
  } catch (const DomainError &) {
    rec.skip_reason = SkipReason::domain_error;
    return rec;
  }
  rec.skipped = false;
  return rec;
}

}  // namespace blendmpc
