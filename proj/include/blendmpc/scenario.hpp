#pragma once

// Scenario description: arena bounds, start and goal poses, point obstacles.
// JSON schema:
//   {name, start:{x,y,yaw}, goal:{x,y,yaw}, d_th, obstacles:[{x,y}],
//    bounds:{x_min,x_max,y_min,y_max}, inflate_obstacles?}

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include "safety.hpp"

namespace blendmpc {

struct ArenaBounds
{
  double x_min{0.0};
  double x_max{0.0};
  double y_min{0.0};
  double y_max{0.0};

  bool contains(const Vec2 & p) const { return p.x() >= x_min && p.x() <= x_max && p.y() >= y_min && p.y() <= y_max; }
};

struct Scenario
{
  std::string name;
  RobotState start;
  GoalPose goal;
  ObstacleSet obstacles;  ///< d_th as written in the document
  ArenaBounds bounds;
  std::optional<double> inflate_obstacles;

  /// Obstacle set used by every consumer: d_th grown by the inflation margin, if any.
  ObstacleSet effective_obstacles() const
  {
    ObstacleSet o = obstacles;
    if (inflate_obstacles) o.d_th += *inflate_obstacles;
    return o;
  }
};

namespace detail {

inline double require_number(const nlohmann::json & j, const char * key, const std::string & path)
{
  if (!j.is_object() || !j.contains(key)) throw ParseError(path + "." + key + ": missing");
  const auto & v = j.at(key);
  if (!v.is_number()) throw ParseError(path + "." + key + ": expected a number");
  return v.get<double>();
}

inline void require_finite(double v, const std::string & path)
{
  if (!std::isfinite(v)) throw ValidationError(path + ": must be finite");
}

}  // namespace detail

/// Checks the scenario invariants and throws ValidationError naming the offending field.
inline void validate_scenario(const Scenario & s)
{
  const ObstacleSet obs = s.effective_obstacles();
  if (!(s.obstacles.d_th > 0.0) || !std::isfinite(s.obstacles.d_th)) throw ValidationError("d_th: must be > 0");
  if (s.inflate_obstacles && !(*s.inflate_obstacles >= 0.0)) throw ValidationError("inflate_obstacles: must be >= 0");
  const auto & b = s.bounds;
  if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max)) throw ValidationError("bounds: min must be below max");
  detail::require_finite(s.start.px, "start.x");
  detail::require_finite(s.start.py, "start.y");
  detail::require_finite(s.start.yaw, "start.yaw");
  detail::require_finite(s.goal.gx, "goal.x");
  detail::require_finite(s.goal.gy, "goal.y");
  detail::require_finite(s.goal.gyaw, "goal.yaw");
  if (!b.contains(s.start.position())) throw ValidationError("start: outside bounds");
  if (!b.contains(s.goal.position())) throw ValidationError("goal: outside bounds");
  for (std::size_t l = 0; l < obs.size(); ++l) {
    const Vec2 & o = obs.centers[l];
    const std::string path = "obstacles[" + std::to_string(l) + "]";
    detail::require_finite(o.x(), path + ".x");
    detail::require_finite(o.y(), path + ".y");
    if (!b.contains(o)) throw ValidationError(path + ": outside bounds");
    if ((s.start.position() - o).norm() < obs.d_th) {
      throw ValidationError("start: inside the keep-out distance of " + path);
    }
    if ((s.goal.position() - o).norm() < obs.d_th) {
      throw ValidationError("goal: inside the keep-out distance of " + path);
    }
  }
}

inline Scenario scenario_from_json(const nlohmann::json & j)
{
  if (!j.is_object()) throw ParseError("scenario: expected an object");
  Scenario s;
  if (j.contains("name")) {
    if (!j.at("name").is_string()) throw ParseError("name: expected a string");
    s.name = j.at("name").get<std::string>();
  }
  if (!j.contains("start")) throw ParseError("start: missing");
  if (!j.contains("goal")) throw ParseError("goal: missing");
  s.start = RobotState{detail::require_number(j.at("start"), "x", "start"), detail::require_number(j.at("start"), "y", "start"),
                       detail::require_number(j.at("start"), "yaw", "start")}
              .canonical();
  s.goal = GoalPose{detail::require_number(j.at("goal"), "x", "goal"), detail::require_number(j.at("goal"), "y", "goal"),
                    wrap_angle(detail::require_number(j.at("goal"), "yaw", "goal"))};
  s.obstacles.d_th = detail::require_number(j, "d_th", "scenario");
  if (j.contains("obstacles")) {
    const auto & arr = j.at("obstacles");
    if (!arr.is_array()) throw ParseError("obstacles: expected an array");
    for (std::size_t l = 0; l < arr.size(); ++l) {
      const std::string path = "obstacles[" + std::to_string(l) + "]";
      s.obstacles.centers.emplace_back(detail::require_number(arr[l], "x", path), detail::require_number(arr[l], "y", path));
    }
  }
  if (!j.contains("bounds")) throw ParseError("bounds: missing");
  const auto & b = j.at("bounds");
  s.bounds = ArenaBounds{detail::require_number(b, "x_min", "bounds"), detail::require_number(b, "x_max", "bounds"),
                         detail::require_number(b, "y_min", "bounds"), detail::require_number(b, "y_max", "bounds")};
  if (j.contains("inflate_obstacles") && !j.at("inflate_obstacles").is_null()) {
    s.inflate_obstacles = detail::require_number(j, "inflate_obstacles", "scenario");
  }
  validate_scenario(s);
  return s;
}

inline nlohmann::json scenario_to_json(const Scenario & s)
{
  nlohmann::json obs = nlohmann::json::array();
  for (const auto & o : s.obstacles.centers) obs.push_back({{"x", o.x()}, {"y", o.y()}});
  nlohmann::json j{
    {"name", s.name},
    {"start", {{"x", s.start.px}, {"y", s.start.py}, {"yaw", s.start.yaw}}},
    {"goal", {{"x", s.goal.gx}, {"y", s.goal.gy}, {"yaw", s.goal.gyaw}}},
    {"d_th", s.obstacles.d_th},
    {"obstacles", obs},
    {"bounds", {{"x_min", s.bounds.x_min}, {"x_max", s.bounds.x_max}, {"y_min", s.bounds.y_min}, {"y_max", s.bounds.y_max}}},
  };
  if (s.inflate_obstacles) j["inflate_obstacles"] = *s.inflate_obstacles;
  return j;
}

/// Parses a scenario document from text.
inline Scenario parse_scenario(const std::string & text)
{
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error & e) {
    throw ParseError(std::string("scenario: ") + e.what());
  }
  return scenario_from_json(j);
}

/// Loads a scenario document from a file.
inline Scenario load_scenario(const std::string & path)
{
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open scenario file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

/// The 8.1 x 5.4 m laboratory arena with ten obstacles. goal_b selects the lower target.
inline Scenario lab_scenario(bool goal_b = false)
{
  Scenario s;
  s.name = goal_b ? "lab_gB" : "lab_gA";
  s.start = {0.8, 2.7, 0.0};
  s.goal = goal_b ? GoalPose{7.3, 1.2, 0.0} : GoalPose{7.3, 4.2, 0.0};
  s.obstacles.d_th = 0.5;
  s.obstacles.centers = {{2.4, 1.3}, {2.4, 2.9}, {2.4, 4.5}, {3.9, 2.1}, {3.9, 3.7},
                         {5.3, 1.2}, {5.3, 2.9}, {5.3, 4.5}, {6.5, 2.2}, {6.5, 3.4}};
  s.bounds = {0.0, 8.1, 0.0, 5.4};
  validate_scenario(s);
  return s;
}

/// Lab-sized arena with no obstacles.
inline Scenario open_scenario()
{
  Scenario s;
  s.name = "open";
  s.start = {0.8, 2.7, 0.0};
  s.goal = {7.3, 2.7, 0.0};
  s.obstacles.d_th = 0.5;
  s.bounds = {0.0, 8.1, 0.0, 5.4};
  return s;
}

/// Seeded random lab-sized scenario with n_obstacles in [min_obstacles, max_obstacles].
/// Obstacles keep 1.2 m center spacing and stay 1 m clear of start and goal.
inline Scenario random_scenario(std::uint64_t seed, int min_obstacles = 3, int max_obstacles = 10)
{
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return a + (b - a) * detail::uniform01(rng); };
  Scenario s;
  s.name = "random_" + std::to_string(seed);
  s.bounds = {0.0, 8.1, 0.0, 5.4};
  s.obstacles.d_th = 0.5;
  s.start = {0.8, uni(1.0, 4.4), uni(-0.5, 0.5)};
  s.goal = {7.3, uni(1.0, 4.4), uni(-0.5, 0.5)};
  const int n = min_obstacles + static_cast<int>(rng() % static_cast<std::uint64_t>(max_obstacles - min_obstacles + 1));
  int attempts = 0;
  while (static_cast<int>(s.obstacles.size()) < n && attempts < 10000) {
    ++attempts;
    const Vec2 c{uni(1.8, 6.6), uni(0.6, 4.8)};
    if ((c - s.start.position()).norm() < 1.0 || (c - s.goal.position()).norm() < 1.0) continue;
    bool clear = true;
    for (const auto & o : s.obstacles.centers) clear = clear && (c - o).norm() >= 1.2;
    if (clear) s.obstacles.centers.push_back(c);
  }
  validate_scenario(s);
  return s;
}

}  // namespace blendmpc
