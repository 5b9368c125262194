#pragma once

// Synthetic human operators that produce uH_meas each tick.

#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>

#include "human_model.hpp"
#include "scenario.hpp"

namespace blendmpc {

enum class OperatorKind { rational, boltzmann, scripted_waypoints, replay, external, idle };

inline std::string_view to_string(OperatorKind k)
{
  switch (k) {
    case OperatorKind::rational: return "rational";
    case OperatorKind::boltzmann: return "boltzmann";
    case OperatorKind::scripted_waypoints: return "scripted_waypoints";
    case OperatorKind::replay: return "replay";
    case OperatorKind::external: return "external";
    case OperatorKind::idle: return "idle";
  }
  return "idle";
}

inline OperatorKind operator_kind_from_string(std::string_view s)
{
  for (auto k : {OperatorKind::rational, OperatorKind::boltzmann, OperatorKind::scripted_waypoints, OperatorKind::replay,
                 OperatorKind::external, OperatorKind::idle}) {
    if (to_string(k) == s) return k;
  }
  if (s == "scripted") return OperatorKind::scripted_waypoints;
  if (s == "zero") return OperatorKind::idle;
  throw std::invalid_argument("unknown operator kind: " + std::string(s));
}

/// Intent parameters of a synthetic driver: firm position tracking, a weak heading
/// term, and an effort penalty heavy enough that the driver eases off near the goal.
inline IntentParams default_true_theta() { return IntentParams::tied(2.0, 0.1, 3.0, 0.05); }

struct PursuitGains
{
  double k_v{0.8};           ///< v = k_v * distance, saturated
  double k_omega{1.5};       ///< omega = k_omega * heading error, saturated
  double switch_radius{0.35};
  double align_radius{0.12}; ///< inside this radius of the final waypoint only yaw is corrected
};

struct OperatorModel
{
  OperatorKind kind{OperatorKind::idle};
  IntentParams true_theta = default_true_theta();
  RationalityCoefficient beta{};
  std::vector<Vec2> waypoints;                 ///< scripted: intermediate points; the goal is appended
  std::vector<VelocityCommand> replay_commands; ///< replay: uH_meas per tick
  std::uint64_t seed{0};
  PursuitGains gains{};
  InputBox box{};  ///< joystick range
};

/// Intermediate waypoints through the lab gaps for the two lab goals; empty otherwise.
inline std::vector<Vec2> default_waypoints(const Scenario & sc)
{
  if (sc.name == "lab_gA") return {{2.4, 3.7}, {3.9, 4.6}, {5.3, 3.7}, {6.5, 4.1}};
  if (sc.name == "lab_gB") return {{2.4, 2.1}, {3.9, 1.1}, {5.3, 2.05}, {6.5, 1.5}};
  return {};
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x)
{
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Per-tick seed derived from an episode seed.
inline std::uint64_t tick_seed(std::uint64_t seed, std::int64_t tick)
{
  return detail::splitmix64(seed ^ detail::splitmix64(static_cast<std::uint64_t>(tick)));
}

class Operator
{
public:
  Operator(OperatorModel model, const Scenario & sc, DynamicsConfig dcfg)
      : m_(std::move(model)), goal_(sc.goal), obs_(sc.effective_obstacles()), dcfg_(dcfg)
  {
    if (m_.kind == OperatorKind::rational || m_.kind == OperatorKind::boltzmann) m_.true_theta.validate();
    if (m_.kind == OperatorKind::scripted_waypoints) {
      path_ = m_.waypoints;
      path_.push_back(goal_.position());
    }
  }

  const OperatorModel & model() const { return m_; }

  /// Command for the given tick at state x.
  VelocityCommand command(const RobotState & x, std::int64_t tick)
  {
    switch (m_.kind) {
      case OperatorKind::rational: {
        try {
          last_ = solve_rational_action(x, m_.true_theta, goal_, obs_, dcfg_, last_);
        } catch (const std::exception &) {
          last_ = solve_rational_action(x, m_.true_theta, goal_, obs_, dcfg_, VelocityCommand{});
        }
        return m_.box.clamp(last_);
      }
      case OperatorKind::boltzmann:
        return sample_boltzmann_action(x, m_.true_theta, m_.beta, goal_, obs_, dcfg_, tick_seed(m_.seed, tick),
                                       ActionGrid{m_.box, 41});
      case OperatorKind::scripted_waypoints: return pursue(x);
      case OperatorKind::replay: {
        if (tick >= 0 && static_cast<std::size_t>(tick) < m_.replay_commands.size()) {
          return m_.replay_commands[static_cast<std::size_t>(tick)];
        }
        return {};
      }
      case OperatorKind::external: {
        std::lock_guard lock(ext_mutex_);
        return external_;
      }
      case OperatorKind::idle: return {};
    }
    return {};
  }

  /// Sets the command returned by an external operator.
  void set_external(const VelocityCommand & u)
  {
    std::lock_guard lock(ext_mutex_);
    external_ = u;
  }

private:
  VelocityCommand pursue(const RobotState & x)
  {
    const auto & g = m_.gains;
    while (next_ + 1 < path_.size() && (path_[next_] - x.position()).norm() < g.switch_radius) ++next_;
    const Vec2 d = path_[next_] - x.position();
    const bool last = next_ + 1 == path_.size();
    if (last && (aligning_ || d.norm() < g.align_radius)) {
      aligning_ = true;
      return m_.box.clamp({0.0, g.k_omega * angle_diff(goal_.gyaw, x.yaw)});
    }
    const double err = angle_diff(std::atan2(d.y(), d.x()), x.yaw);
    const double v = g.k_v * d.norm() * std::max(0.0, std::cos(err));
    return m_.box.clamp({v, g.k_omega * err});
  }

  OperatorModel m_;
  GoalPose goal_;
  ObstacleSet obs_;
  DynamicsConfig dcfg_;
  VelocityCommand last_{};
  std::vector<Vec2> path_;
  std::size_t next_{0};
  bool aligning_{false};
  std::mutex ext_mutex_;
  VelocityCommand external_{};
};

}  // namespace blendmpc
