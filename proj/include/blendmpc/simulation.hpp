#pragma once

// 10 Hz closed loop: operator -> NMPC -> blend -> step -> adapt, plus
// episode metrics and the JSON-lines episode log.

#include <nlohmann/json.hpp>

#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>

#include "adaptation.hpp"
#include "arbitration.hpp"
#include "nmpc.hpp"
#include "operator.hpp"

namespace blendmpc {

struct EpisodeOptions
{
  double goal_tolerance{0.2};   ///< m
  double yaw_tolerance{0.3};    ///< rad
  bool stop_at_goal{true};
  bool one_tick_delay{false};   ///< apply the previous tick's robot input
  bool rational_prediction{false};  ///< adapt with a fresh rational solve instead of the NMPC's uH_{t|t}
  bool plan_with_effective_lambda{true};  ///< plan with lambda = 1 while the human is in the deadband
  IntentParams theta0{};        ///< initial estimate
};

struct TickRecord
{
  std::int64_t tick{0};
  double t{0.0};
  RobotState state;       ///< before the step
  RobotState next_state;  ///< after the step
  VelocityCommand uH_meas;
  VelocityCommand uH_pred;
  VelocityCommand uR;
  VelocityCommand u_applied;
  double lambda_effective{1.0};
  IntentParams theta_hat;  ///< after this tick's update
  double h_min{std::numeric_limits<double>::infinity()};
  double psi_min{std::numeric_limits<double>::infinity()};
  double delta0{0.0};
  double cost{0.0};
  int solver_iters{0};
  double solver_viol{0.0};
  double solver_time{0.0};
  bool solver_converged{false};
  bool fallback{false};
  double prediction_cost{0.0};
  bool adapt_skipped{true};
  SkipReason adapt_reason{SkipReason::none};

  /// Equality on every field except the wall-clock solve time.
  bool same_outcome(const TickRecord & o) const
  {
    return tick == o.tick && t == o.t && state == o.state && next_state == o.next_state && uH_meas == o.uH_meas &&
           uH_pred == o.uH_pred && uR == o.uR && u_applied == o.u_applied && lambda_effective == o.lambda_effective &&
           theta_hat == o.theta_hat && h_min == o.h_min && psi_min == o.psi_min && delta0 == o.delta0 && cost == o.cost &&
           solver_iters == o.solver_iters && solver_viol == o.solver_viol && solver_converged == o.solver_converged &&
           fallback == o.fallback && prediction_cost == o.prediction_cost && adapt_skipped == o.adapt_skipped &&
           adapt_reason == o.adapt_reason;
  }
};

struct EpisodeResult
{
  bool success{false};
  double time_to_goal{std::numeric_limits<double>::quiet_NaN()};
  double min_obstacle_distance{std::numeric_limits<double>::infinity()};
  double path_length{0.0};
  double human_effort{0.0};
  double mean_prediction_cost_first10s{0.0};
  double mean_prediction_cost_last10s{0.0};
  double mean_tracking_error{0.0};  ///< mean |u_applied - uH_meas|
  double min_psi{std::numeric_limits<double>::infinity()};
  double mean_solve_time{0.0};
  double max_solve_time{0.0};
  int fallback_count{0};
  std::int64_t ticks{0};
  std::vector<TickRecord> trace;
};

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

inline double point_segment_distance(const Vec2 & p, const Vec2 & a, const Vec2 & b)
{
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 == 0.0) return (p - a).norm();
  const double s = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + s * ab)).norm();
}

/// Minimum center distance over the piecewise-linear path.
inline double path_min_distance(const std::vector<Vec2> & path, const ObstacleSet & obs)
{
  double best = std::numeric_limits<double>::infinity();
  if (path.empty()) return best;
  for (const auto & o : obs.centers) {
    if (path.size() == 1) best = std::min(best, (path[0] - o).norm());
    for (std::size_t i = 0; i + 1 < path.size(); ++i) best = std::min(best, point_segment_distance(o, path[i], path[i + 1]));
  }
  return best;
}

inline double path_length(const std::vector<Vec2> & path)
{
  double len = 0.0;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) len += (path[i + 1] - path[i]).norm();
  return len;
}

inline bool at_goal(const RobotState & x, const GoalPose & g, const EpisodeOptions & opt)
{
  return (x.position() - g.position()).norm() <= opt.goal_tolerance && std::abs(angle_diff(x.yaw, g.gyaw)) <= opt.yaw_tolerance;
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

class ClosedLoop
{
public:
  ClosedLoop(Scenario sc, NmpcConfig ncfg, BlendConfig bcfg, AdaptationConfig acfg, EpisodeOptions opt = {})
      : sc_(std::move(sc)), obs_(sc_.effective_obstacles()), solver_(std::move(ncfg)), bcfg_(bcfg), acfg_(acfg),
        opt_(opt), x_(sc_.start), theta_(opt.theta0)
  {
    bcfg_.validate();
    acfg_.validate();
    theta_.validate();
  }

  const Scenario & scenario() const { return sc_; }
  const RobotState & state() const { return x_; }
  const IntentParams & theta() const { return theta_; }
  std::int64_t tick() const { return tick_; }
  double time() const { return static_cast<double>(tick_) * solver_.config().dynamics.ts; }
  bool finished() const { return at_goal(x_, sc_.goal, opt_); }
  const std::optional<HorizonSolution> & last_solution() const { return last_; }
  const NmpcConfig & nmpc_config() const { return solver_.config(); }
  const BlendConfig & blend_config() const { return bcfg_; }
  const EpisodeOptions & options() const { return opt_; }

  /// Changes the arbitration weight for both the planner and the blend.
  void set_lambda(double lambda)
  {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
    bcfg_.lambda = lambda;
    solver_.config().lambda = lambda;
    solver_.reset();
  }

  /**
   * @brief Executes one tick with the measured human command.
   *
   * @param deadline if set, a solve slower than this many seconds is discarded
   *        and the shifted previous solution is applied instead.
   */
  TickRecord step(const VelocityCommand & uH_meas, std::optional<double> deadline = std::nullopt)
  {
    const NmpcConfig & ncfg = solver_.config();
    TickRecord rec;
    rec.tick = tick_;
    rec.t = time();
    rec.state = x_;
    rec.uH_meas = uH_meas;

    std::optional<HorizonSolution> sol;
    try {
      std::optional<double> plan_lambda;
      if (opt_.plan_with_effective_lambda && bcfg_.deadband.contains(uH_meas)) plan_lambda = 1.0;
      sol = solver_.solve(x_, theta_, sc_, plan_lambda);
      rec.solver_time = sol->solve_time;
      if (deadline && sol->solve_time > *deadline) {
        ++overruns_;
        solver_.discard_last();
        sol = solver_.fallback(x_);
        rec.fallback = true;
      }
    } catch (const SolverFailure &) {
      sol = solver_.fallback(x_);
      rec.fallback = true;
    }
    if (sol) {
      rec.uR = sol->robot_inputs.front();
      rec.uH_pred = sol->human_inputs.front();
      rec.delta0 = sol->slacks.front();
      rec.cost = sol->cost;
      rec.solver_iters = sol->sqp_iterations;
      rec.solver_viol = sol->max_constraint_violation;
      rec.solver_converged = sol->converged;
    }
    last_ = sol;

    const VelocityCommand uR_applied = opt_.one_tick_delay ? delayed_uR_ : rec.uR;
    delayed_uR_ = rec.uR;
    const BlendResult b = blend(uR_applied, uH_meas, bcfg_);
    rec.u_applied = b.u;
    rec.lambda_effective = b.lambda_effective;

    if (!obs_.empty()) {
      rec.h_min = h_values(x_, obs_).minCoeff();
      rec.psi_min = psi(x_, b.u, obs_, BarrierConfig{ncfg.gamma, obs_.d_th}, ncfg.dynamics).minCoeff();
    }

    // Adaptation at the pre-step state.
    VelocityCommand pred = rec.uH_pred;
    bool pred_ok = sol.has_value();
    try {
      if (opt_.rational_prediction) {
        pred = solve_rational_action(x_, theta_, sc_.goal, obs_, ncfg.dynamics, pred);
      } else if (pred_ok && !(phi_residual(x_, pred, theta_, sc_.goal, obs_, ncfg.dynamics).norm() <= 1e-4)) {
        pred = solve_rational_action(x_, theta_, sc_.goal, obs_, ncfg.dynamics, pred);
      }
    } catch (const std::exception &) {
      pred_ok = false;
    }
    AdaptationRecord ar;
    if (pred_ok) {
      ar = update(theta_, x_, pred, uH_meas, sc_.goal, obs_, ncfg.dynamics, acfg_);
    } else {
      ar = AdaptationRecord{theta_, theta_, pred, uH_meas, prediction_cost(pred, uH_meas, acfg_), true,
                            acfg_.v_dead >= std::abs(uH_meas.v) && acfg_.omega_dead >= std::abs(uH_meas.omega)
                              ? SkipReason::deadband
                              : SkipReason::not_stationary};
    }
    rec.uH_pred = pred;
    rec.prediction_cost = ar.cost_J;
    rec.adapt_skipped = ar.skipped;
    rec.adapt_reason = ar.skip_reason;
    theta_ = ar.theta_after;
    rec.theta_hat = theta_;

    x_ = blendmpc::step(x_, b.u, ncfg.dynamics);
    rec.next_state = x_;
    ++tick_;
    return rec;
  }

  int overruns() const { return overruns_; }

private:
  Scenario sc_;
  ObstacleSet obs_;
  NmpcSolver solver_;
  BlendConfig bcfg_;
  AdaptationConfig acfg_;
  EpisodeOptions opt_;
  RobotState x_;
  IntentParams theta_;
  std::int64_t tick_{0};
  std::optional<HorizonSolution> last_;
  VelocityCommand delayed_uR_{};
  int overruns_{0};
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline std::vector<Vec2> trace_path(const std::vector<TickRecord> & trace)
{
  std::vector<Vec2> path;
  if (trace.empty()) return path;
  path.reserve(trace.size() + 1);
  path.push_back(trace.front().state.position());
  for (const auto & r : trace) path.push_back(r.next_state.position());
  return path;
}

/// Episode metrics from a non-empty trace. @throws EmptyTrace
inline EpisodeResult compute_metrics(
  const std::vector<TickRecord> & trace, const Scenario & sc, const EpisodeOptions & opt = {}, double ts = 0.1)
{
  if (trace.empty()) throw EmptyTrace("compute_metrics: empty trace");
  EpisodeResult r;
  const std::vector<Vec2> path = trace_path(trace);
  r.min_obstacle_distance = path_min_distance(path, sc.effective_obstacles());
  r.path_length = path_length(path);
  r.ticks = static_cast<std::int64_t>(trace.size());

  const double t_end = trace.back().t + ts;
  double first = 0.0, last = 0.0, track = 0.0, solve = 0.0;
  int n_first = 0, n_last = 0;
  for (const auto & rec : trace) {
    r.human_effort += rec.uH_meas.vec().squaredNorm() * ts;
    if (rec.t < 10.0 - 1e-9) {
      first += rec.prediction_cost;
      ++n_first;
    }
    if (rec.t >= t_end - 10.0 - 1e-9) {
      last += rec.prediction_cost;
      ++n_last;
    }
    track += (rec.u_applied.vec() - rec.uH_meas.vec()).norm();
    solve += rec.solver_time;
    r.max_solve_time = std::max(r.max_solve_time, rec.solver_time);
    r.min_psi = std::min(r.min_psi, rec.psi_min);
    r.fallback_count += rec.fallback ? 1 : 0;
    if (!r.success && at_goal(rec.next_state, sc.goal, opt)) {
      r.success = true;
      r.time_to_goal = rec.t + ts;
    }
  }
  r.mean_prediction_cost_first10s = n_first ? first / n_first : 0.0;
  r.mean_prediction_cost_last10s = n_last ? last / n_last : 0.0;
  r.mean_tracking_error = track / static_cast<double>(trace.size());
  r.mean_solve_time = solve / static_cast<double>(trace.size());
  return r;
}

/// Runs one episode at 10 Hz simulated time. Deterministic given the seed
/// (wall-clock solve times excepted).
inline EpisodeResult run_episode(
  const Scenario & sc, OperatorModel op, const NmpcConfig & ncfg, const BlendConfig & bcfg, const AdaptationConfig & acfg,
  double duration_limit, std::uint64_t seed, const EpisodeOptions & opt = {},
  const std::function<void(const TickRecord &)> & on_tick = {})
{
  op.seed = seed;
  ClosedLoop loop(sc, ncfg, bcfg, acfg, opt);
  Operator human(op, sc, ncfg.dynamics);
  const double ts = ncfg.dynamics.ts;
  const auto max_ticks = static_cast<std::int64_t>(std::floor(duration_limit / ts + 1e-9));

  std::vector<TickRecord> trace;
  for (std::int64_t k = 0; k < max_ticks; ++k) {
    const VelocityCommand uH = human.command(loop.state(), loop.tick());
    trace.push_back(loop.step(uH));
    if (on_tick) on_tick(trace.back());
    if (opt.stop_at_goal && loop.finished()) break;
  }
  if (trace.empty()) {
    EpisodeResult r;
    r.min_obstacle_distance = path_min_distance({sc.start.position()}, sc.effective_obstacles());
    return r;
  }
  EpisodeResult r = compute_metrics(trace, sc, opt, ts);
  r.trace = std::move(trace);
  return r;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline double num_or(const nlohmann::json & j, double fallback)
{
  return j.is_number() ? j.get<double>() : fallback;
}

inline nlohmann::json cmd_json(const VelocityCommand & u) { return {{"v", u.v}, {"omega", u.omega}}; }
inline VelocityCommand cmd_from(const nlohmann::json & j) { return {j.at("v").get<double>(), j.at("omega").get<double>()}; }
inline nlohmann::json pose_json(const RobotState & x) { return {{"x", x.px}, {"y", x.py}, {"yaw", x.yaw}}; }
inline RobotState pose_from(const nlohmann::json & j)
{
  return {j.at("x").get<double>(), j.at("y").get<double>(), j.at("yaw").get<double>()};
}

inline nlohmann::json theta_json(const IntentParams & p)
{
  const Vec5 v = p.vec();
  return nlohmann::json::array({v[0], v[1], v[2], v[3], v[4]});
}

inline SkipReason skip_reason_from(std::string_view s)
{
  for (auto r : {SkipReason::none, SkipReason::deadband, SkipReason::singular_jacobian, SkipReason::domain_error,
                 SkipReason::not_stationary}) {
    if (to_string(r) == s) return r;
  }
  throw ParseError("unknown skip reason " + std::string(s));
}

}  // namespace detail

inline nlohmann::json to_json(const TickRecord & r)
{
  using detail::num;
  return {
    {"t", r.t},
    {"tick", r.tick},
    {"state", detail::pose_json(r.state)},
    {"next_state", detail::pose_json(r.next_state)},
    {"uH_meas", detail::cmd_json(r.uH_meas)},
    {"uH_pred", detail::cmd_json(r.uH_pred)},
    {"uR", detail::cmd_json(r.uR)},
    {"u_applied", detail::cmd_json(r.u_applied)},
    {"lambda_effective", r.lambda_effective},
    {"theta_hat", detail::theta_json(r.theta_hat)},
    {"h_min", num(r.h_min)},
    {"psi_min", num(r.psi_min)},
    {"delta0", r.delta0},
    {"cost", r.cost},
    {"solver", {{"iters", r.solver_iters}, {"viol", r.solver_viol}, {"time", r.solver_time}, {"converged", r.solver_converged},
                {"fallback", r.fallback}}},
    {"adaptation", {{"J", r.prediction_cost}, {"skipped", r.adapt_skipped}, {"reason", to_string(r.adapt_reason)}}},
  };
}

inline TickRecord tick_record_from_json(const nlohmann::json & j)
{
  constexpr double inf = std::numeric_limits<double>::infinity();
  try {
    TickRecord r;
    r.t = j.at("t").get<double>();
    r.tick = j.value("tick", std::int64_t{0});
    r.state = detail::pose_from(j.at("state"));
    r.next_state = j.contains("next_state") ? detail::pose_from(j.at("next_state")) : r.state;
    r.uH_meas = detail::cmd_from(j.at("uH_meas"));
    r.uH_pred = detail::cmd_from(j.at("uH_pred"));
    r.uR = detail::cmd_from(j.at("uR"));
    r.u_applied = detail::cmd_from(j.at("u_applied"));
    r.lambda_effective = j.at("lambda_effective").get<double>();
    const auto & th = j.at("theta_hat");
    r.theta_hat = IntentParams{th.at(0).get<double>(), th.at(1).get<double>(), th.at(2).get<double>(),
                               th.at(3).get<double>(), th.at(4).get<double>()};
    r.h_min = detail::num_or(j.at("h_min"), inf);
    r.psi_min = detail::num_or(j.at("psi_min"), inf);
    r.delta0 = j.at("delta0").get<double>();
    r.cost = j.at("cost").get<double>();
    const auto & s = j.at("solver");
    r.solver_iters = s.at("iters").get<int>();
    r.solver_viol = s.at("viol").get<double>();
    r.solver_time = s.at("time").get<double>();
    r.solver_converged = s.value("converged", false);
    r.fallback = s.value("fallback", false);
    if (j.contains("adaptation")) {
      const auto & a = j.at("adaptation");
      r.prediction_cost = a.at("J").get<double>();
      r.adapt_skipped = a.at("skipped").get<bool>();
      r.adapt_reason = detail::skip_reason_from(a.at("reason").get<std::string>());
    }
    return r;
  } catch (const nlohmann::json::exception & e) {
    throw ParseError(std::string("episode log record: ") + e.what());
  }
}

inline nlohmann::json metrics_json(const EpisodeResult & r)
{
  using detail::num;
  return {
    {"success", r.success},
    {"time_to_goal", num(r.time_to_goal)},
    {"min_obstacle_distance", num(r.min_obstacle_distance)},
    {"path_length", r.path_length},
    {"human_effort", r.human_effort},
    {"mean_prediction_cost_first10s", r.mean_prediction_cost_first10s},
    {"mean_prediction_cost_last10s", r.mean_prediction_cost_last10s},
    {"mean_tracking_error", r.mean_tracking_error},
    {"min_psi", num(r.min_psi)},
    {"mean_solve_time", r.mean_solve_time},
    {"max_solve_time", r.max_solve_time},
    {"fallback_count", r.fallback_count},
    {"ticks", r.ticks},
  };
}

/// One JSON document per line.
inline std::string episode_log(const std::vector<TickRecord> & trace)
{
  std::string out;
  for (const auto & r : trace) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline void write_episode_log(const std::string & path, const std::vector<TickRecord> & trace)
{
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << episode_log(trace);
}

inline std::vector<TickRecord> parse_episode_log(const std::string & text)
{
  std::vector<TickRecord> trace;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error & e) {
      throw ParseError(std::string("episode log: ") + e.what());
    }
    trace.push_back(tick_record_from_json(j));
  }
  return trace;
}

inline std::vector<TickRecord> read_episode_log(const std::string & path)
{
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open episode log " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_episode_log(ss.str());
}

/// Replay operator built from a recorded trace.
inline OperatorModel replay_operator(const std::vector<TickRecord> & trace)
{
  OperatorModel m;
  m.kind = OperatorKind::replay;
  for (const auto & r : trace) m.replay_commands.push_back(r.uH_meas);
  return m;
}

}  // namespace blendmpc
