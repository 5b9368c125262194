#pragma once

// Linear blending u = lambda uR + (1 - lambda) uH with deadband takeover and
// post-blend saturation.

#include "types.hpp"

namespace blendmpc {

struct Deadband
{
  double v{0.02};      ///< m/s
  double omega{0.04};  ///< rad/s

  bool contains(const VelocityCommand & u) const { return std::abs(u.v) <= v && std::abs(u.omega) <= omega; }
};

struct BlendConfig
{
  double lambda{0.35};
  double v_max{0.4};
  double omega_max{0.8};
  Deadband deadband{};

  void validate() const
  {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("BlendConfig.lambda must lie in [0, 1]");
    if (!(v_max > 0.0 && omega_max > 0.0)) throw std::invalid_argument("BlendConfig saturation limits must be > 0");
  }
};

struct BlendResult
{
  VelocityCommand u;
  double lambda_effective{1.0};
};

inline BlendResult blend(const VelocityCommand & uR, const VelocityCommand & uH, const BlendConfig & cfg)
{
  const double lam = cfg.deadband.contains(uH) ? 1.0 : cfg.lambda;
  const VelocityCommand raw{lam * uR.v + (1.0 - lam) * uH.v, lam * uR.omega + (1.0 - lam) * uH.omega};
  return {InputBox{cfg.v_max, cfg.omega_max}.clamp(raw), lam};
}

}  // namespace blendmpc
