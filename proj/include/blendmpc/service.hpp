#pragma once

// Live teleoperation sessions: real-time closed loop, latest-wins command
// ingestion, telemetry frames. Transport-agnostic; see net/server.hpp.

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

#include "simulation.hpp"

namespace blendmpc {

struct UnknownScenario : std::runtime_error
{
  using std::runtime_error::runtime_error;
};
struct UnknownSession : std::runtime_error
{
  using std::runtime_error::runtime_error;
};
struct SessionNotRunning : std::runtime_error
{
  using std::runtime_error::runtime_error;
};

enum class SessionMode { running, paused, finished };

inline std::string_view to_string(SessionMode m)
{
  switch (m) {
    case SessionMode::running: return "running";
    case SessionMode::paused: return "paused";
    case SessionMode::finished: return "finished";
  }
  return "paused";
}

using Clock = std::chrono::steady_clock;

struct SessionConfig
{
  NmpcConfig nmpc{};
  BlendConfig blend{};
  AdaptationConfig adapt{};
  EpisodeOptions options{};
  double command_timeout{0.3};       ///< s; older commands count as zero input
  double duration_limit{120.0};      ///< simulated seconds
  std::optional<double> deadline{};  ///< solve budget per tick, s

  /// Applies overrides such as {"lambda": 0.0}. @throws std::invalid_argument on unknown keys or bad values.
  void apply_overrides(const nlohmann::json & j)
  {
    if (j.is_null()) return;
    if (!j.is_object()) throw std::invalid_argument("config overrides must be a JSON object");
    for (const auto & [key, value] : j.items()) {
      if (!value.is_number() && !(key == "deadline" && value.is_null())) {
        throw std::invalid_argument("override '" + key + "' must be a number");
      }
      if (key == "lambda") {
        nmpc.lambda = blend.lambda = value.get<double>();
      } else if (key == "slack_weight") {
        nmpc.slack_weight = value.get<double>();
      } else if (key == "horizon") {
        nmpc.horizon = value.get<int>();
      } else if (key == "max_sqp_iters") {
        nmpc.max_sqp_iters = value.get<int>();
      } else if (key == "gamma") {
        nmpc.gamma = value.get<double>();
      } else if (key == "command_timeout") {
        command_timeout = value.get<double>();
      } else if (key == "duration_limit") {
        duration_limit = value.get<double>();
      } else if (key == "deadline") {
        deadline = value.is_null() ? std::nullopt : std::optional<double>(value.get<double>());
      } else {
        throw std::invalid_argument("unknown override '" + key + "'");
      }
    }
    nmpc.validate();
    blend.validate();
    if (!(command_timeout > 0.0)) throw std::invalid_argument("command_timeout must be > 0");
    if (!(duration_limit >= 0.0)) throw std::invalid_argument("duration_limit must be >= 0");
  }
};

/// FNV-1a over the obstacle centers and threshold, as 16 hex digits.
inline std::string obstacles_digest(const ObstacleSet & obs)
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](double v) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  };
  feed(obs.d_th);
  for (const auto & c : obs.centers) {
    feed(c.x());
    feed(c.y());
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// 21 evenly spaced knots of the predicted state trajectory.
inline nlohmann::json horizon_preview(const HorizonSolution & sol, int knots = 21)
{
  nlohmann::json out = nlohmann::json::array();
  const int N = sol.horizon();
  for (int i = 0; i < knots; ++i) {
    const auto k = static_cast<std::size_t>((i * N) / (knots - 1));
    out.push_back({{"x", sol.states[k].px}, {"y", sol.states[k].py}});
  }
  return out;
}

struct CommandAck
{
  bool dropped{false};
};

class Session
{
public:
  using Listener = std::function<void(const nlohmann::json &)>;

  Session(std::string id, Scenario sc, SessionConfig cfg)
      : id_(std::move(id)), sc_(std::move(sc)), cfg_(std::move(cfg)), digest_(obstacles_digest(sc_.effective_obstacles()))
  {
    loop_ = std::make_unique<ClosedLoop>(sc_, cfg_.nmpc, cfg_.blend, cfg_.adapt, cfg_.options);
  }

  const std::string & id() const { return id_; }
  const Scenario & scenario() const { return sc_; }
  const SessionConfig & config() const { return cfg_; }

  SessionMode mode() const
  {
    std::lock_guard lock(mutex_);
    return mode_;
  }

  /// Stores the command if client_seq is newer than every previous one.
  /// @throws SessionNotRunning
  CommandAck ingest_command(double v, double omega, std::int64_t client_seq, Clock::time_point now = Clock::now())
  {
    if (!std::isfinite(v) || !std::isfinite(omega)) throw std::invalid_argument("command must be finite");
    std::lock_guard lock(mutex_);
    if (mode_ != SessionMode::running) throw SessionNotRunning("session " + id_ + " is " + std::string(to_string(mode_)));
    if (last_client_seq_ && client_seq <= *last_client_seq_) return {true};
    last_client_seq_ = client_seq;
    cmd_ = {v, omega};
    cmd_time_ = now;
    return {false};
  }

  /// Handles {"key": "lambda"|"paused", "value": ...}.
  void set(const std::string & key, const nlohmann::json & value)
  {
    std::lock_guard lock(mutex_);
    if (key == "lambda") {
      if (!value.is_number()) throw std::invalid_argument("lambda must be a number");
      loop_->set_lambda(value.get<double>());
      cfg_.nmpc.lambda = cfg_.blend.lambda = value.get<double>();
    } else if (key == "paused") {
      if (!value.is_boolean()) throw std::invalid_argument("paused must be a boolean");
      if (mode_ != SessionMode::finished) mode_ = value.get<bool>() ? SessionMode::paused : SessionMode::running;
      cv_.notify_all();
    } else {
      throw std::invalid_argument("unknown key '" + key + "'");
    }
  }

  /// Back to the start pose, paused, with a fresh trace. Telemetry seq keeps counting.
  void reset()
  {
    std::lock_guard lock(mutex_);
    loop_ = std::make_unique<ClosedLoop>(sc_, cfg_.nmpc, cfg_.blend, cfg_.adapt, cfg_.options);
    trace_.clear();
    mode_ = SessionMode::paused;
    cmd_ = {};
    cmd_time_.reset();
    last_client_seq_.reset();
  }

  /**
   * @brief One closed-loop tick with the latest command, or zero if it is stale.
   *
   * Returns the frames produced: a state frame, followed by a result frame when
   * the session finishes. Returns nothing unless running.
   */
  std::vector<nlohmann::json> tick(Clock::time_point now = Clock::now())
  {
    std::lock_guard lock(mutex_);
    std::vector<nlohmann::json> frames;
    if (mode_ != SessionMode::running) return frames;
    VelocityCommand u{};
    if (cmd_time_ && std::chrono::duration<double>(now - *cmd_time_).count() <= cfg_.command_timeout) u = cmd_;
    trace_.push_back(loop_->step(u, cfg_.deadline));
    const double ts = cfg_.nmpc.dynamics.ts;
    const bool timed_out = static_cast<double>(loop_->tick()) * ts >= cfg_.duration_limit - 1e-9;
    if (loop_->finished() || timed_out) mode_ = SessionMode::finished;
    frames.push_back(state_frame(trace_.back()));
    if (mode_ == SessionMode::finished) {
      EpisodeResult r = compute_metrics(trace_, sc_, cfg_.options, ts);
      frames.push_back({{"type", "result"}, {"session", id_}, {"seq", next_seq_++}, {"metrics", metrics_json(r)}});
    }
    return frames;
  }

  std::vector<TickRecord> trace() const
  {
    std::lock_guard lock(mutex_);
    return trace_;
  }

  std::string log() const
  {
    std::lock_guard lock(mutex_);
    return episode_log(trace_);
  }

  int overruns() const
  {
    std::lock_guard lock(mutex_);
    return loop_->overruns();
  }

  nlohmann::json summary() const
  {
    std::lock_guard lock(mutex_);
    return {{"session", id_}, {"scenario", sc_.name}, {"mode", to_string(mode_)}, {"tick", loop_->tick()},
            {"lambda", cfg_.blend.lambda}};
  }

  // Fan-out of frames to connected clients.

  std::uint64_t subscribe(Listener fn)
  {
    std::lock_guard lock(listeners_mutex_);
    listeners_.emplace(++next_listener_, std::move(fn));
    return next_listener_;
  }

  void unsubscribe(std::uint64_t handle)
  {
    std::lock_guard lock(listeners_mutex_);
    listeners_.erase(handle);
  }

  void publish(const nlohmann::json & frame)
  {
    std::vector<Listener> targets;
    {
      std::lock_guard lock(listeners_mutex_);
      for (const auto & [h, fn] : listeners_) targets.push_back(fn);
    }
    for (const auto & fn : targets) fn(frame);
  }

  void wake() { cv_.notify_all(); }

  /// Blocks until the session runs or the timeout elapses. Returns true when running.
  bool wait_running(std::chrono::milliseconds timeout)
  {
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, timeout, [&] { return mode_ == SessionMode::running; });
  }

private:
  nlohmann::json state_frame(const TickRecord & r)
  {
    using nlohmann::json;
    const auto & sol = loop_->last_solution();
    const GoalPose & g = sc_.goal;
    json frame{{"type", "state"},
               {"session", id_},
               {"seq", next_seq_++},
               {"t", r.t + cfg_.nmpc.dynamics.ts},
               {"tick", r.tick},
               {"robot", detail::pose_json(r.next_state)},
               {"uH", detail::cmd_json(r.uH_meas)},
               {"uH_pred", detail::cmd_json(r.uH_pred)},
               {"uR", detail::cmd_json(r.uR)},
               {"u_applied", detail::cmd_json(r.u_applied)},
               {"lambda_effective", r.lambda_effective},
               {"theta_hat", std::vector<double>{r.theta_hat.theta1_x, r.theta_hat.theta1_y, r.theta_hat.theta1_yaw,
                                                 r.theta_hat.theta2, r.theta_hat.theta3}},
               {"h_min", detail::num(r.h_min)},
               {"psi_min", detail::num(r.psi_min)},
               {"goal", {{"x", g.gx}, {"y", g.gy}, {"yaw", g.gyaw}}},
               {"obstacles_digest", digest_},
               {"horizon", sol ? horizon_preview(*sol) : json::array()},
               {"solver", {{"iters", r.solver_iters}, {"time_ms", r.solver_time * 1e3}, {"fallback", r.fallback}}},
               {"mode", to_string(mode_)}};
    return frame;
  }

  std::string id_;
  Scenario sc_;
  SessionConfig cfg_;
  std::string digest_;

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::unique_ptr<ClosedLoop> loop_;
  std::vector<TickRecord> trace_;
  SessionMode mode_{SessionMode::paused};
  VelocityCommand cmd_{};
  std::optional<Clock::time_point> cmd_time_;
  std::optional<std::int64_t> last_client_seq_;
  std::int64_t next_seq_{0};

  std::mutex listeners_mutex_;
  std::map<std::uint64_t, Listener> listeners_;
  std::uint64_t next_listener_{0};
};

/**
 * @brief Fixed-rate driver for one session on its own thread.
 *
 * Frames computed during slot k are published at the start of slot k+1, so the
 * frame cadence follows the scheduler rather than the solve time.
 */
class SessionRunner
{
public:
  explicit SessionRunner(std::shared_ptr<Session> s, double period = 0.1) : s_(std::move(s)), period_(period)
  {
    thread_ = std::thread([this] { run(); });
  }
  ~SessionRunner()
  {
    stop_ = true;
    s_->wake();
    if (thread_.joinable()) thread_.join();
  }
  SessionRunner(const SessionRunner &) = delete;
  SessionRunner & operator=(const SessionRunner &) = delete;

private:
  void run()
  {
    const auto period = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(period_));
    std::vector<nlohmann::json> pending;
    auto next = Clock::now();
    while (!stop_) {
      if (s_->mode() != SessionMode::running) {
        for (const auto & f : pending) s_->publish(f);
        pending.clear();
        s_->wait_running(std::chrono::milliseconds(50));
        next = Clock::now();
        continue;
      }
      std::this_thread::sleep_until(next);
      next += period;
      for (const auto & f : pending) s_->publish(f);
      pending = s_->tick();
    }
  }

  std::shared_ptr<Session> s_;
  double period_;
  std::atomic<bool> stop_{false};
  std::thread thread_;
};

/// Name-indexed scenario catalogue; starts with the built-in scenarios.
class ScenarioRegistry
{
public:
  ScenarioRegistry()
  {
    add(lab_scenario(false));
    add(lab_scenario(true));
    add(open_scenario());
  }

  void add(Scenario sc)
  {
    validate_scenario(sc);
    std::string name = sc.name;
    scenarios_.insert_or_assign(std::move(name), std::move(sc));
  }

  /// @throws UnknownScenario
  const Scenario & get(const std::string & name) const
  {
    auto it = scenarios_.find(name);
    if (it == scenarios_.end()) throw UnknownScenario("unknown scenario '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names() const
  {
    std::vector<std::string> out;
    for (const auto & [name, sc] : scenarios_) out.push_back(name);
    return out;
  }

  nlohmann::json to_json() const
  {
    nlohmann::json out = nlohmann::json::array();
    for (const auto & [name, sc] : scenarios_) out.push_back(scenario_to_json(sc));
    return out;
  }

private:
  std::map<std::string, Scenario> scenarios_;
};

/// Owns sessions and, in real-time mode, one runner per session.
class SessionManager
{
public:
  explicit SessionManager(ScenarioRegistry registry = {}, bool realtime = true)
      : registry_(std::move(registry)), realtime_(realtime)
  {
  }

  const ScenarioRegistry & scenarios() const { return registry_; }

  /// @throws UnknownScenario, std::invalid_argument on bad overrides
  std::shared_ptr<Session> create(const std::string & scenario, const nlohmann::json & overrides = nullptr)
  {
    const Scenario & sc = registry_.get(scenario);
    SessionConfig cfg;
    if (realtime_) cfg.deadline = 0.1;
    cfg.apply_overrides(overrides);
    std::lock_guard lock(mutex_);
    char id[32];
    std::snprintf(id, sizeof(id), "s%04llu", static_cast<unsigned long long>(++counter_));
    auto s = std::make_shared<Session>(id, sc, std::move(cfg));
    Entry e{s, nullptr};
    if (realtime_) e.runner = std::make_unique<SessionRunner>(s);
    sessions_.emplace(id, std::move(e));
    return s;
  }

  /// @throws UnknownSession
  std::shared_ptr<Session> get(const std::string & id) const
  {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw UnknownSession("unknown session '" + id + "'");
    return it->second.session;
  }

  void remove(const std::string & id)
  {
    Entry e;
    {
      std::lock_guard lock(mutex_);
      auto it = sessions_.find(id);
      if (it == sessions_.end()) throw UnknownSession("unknown session '" + id + "'");
      e = std::move(it->second);
      sessions_.erase(it);
    }
  }

  nlohmann::json list() const
  {
    std::lock_guard lock(mutex_);
    nlohmann::json out = nlohmann::json::array();
    for (const auto & [id, e] : sessions_) out.push_back(e.session->summary());
    return out;
  }

  ~SessionManager()
  {
    std::map<std::string, Entry> doomed;
    {
      std::lock_guard lock(mutex_);
      doomed.swap(sessions_);
    }
  }

private:
  struct Entry
  {
    std::shared_ptr<Session> session;
    std::unique_ptr<SessionRunner> runner;
  };

  ScenarioRegistry registry_;
  bool realtime_;
  mutable std::mutex mutex_;
  std::map<std::string, Entry> sessions_;
  std::uint64_t counter_{0};
};

/**
 * @brief Handles one client message for a connection.
 *
 * `bound` is the session the connection joined with "hello"; it is updated in
 * place. Returns the direct reply, or null when there is none.
 */
inline nlohmann::json handle_client_message(
  SessionManager & mgr, const nlohmann::json & msg, std::shared_ptr<Session> & bound,
  const std::function<void(const std::shared_ptr<Session> &)> & on_hello = {})
{
  using nlohmann::json;
  auto error = [&](const std::string & code, const std::string & message) {
    json e{{"type", "error"}, {"code", code}, {"message", message}};
    if (bound) e["session"] = bound->id();
    return e;
  };
  try {
    if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string()) return error("bad_request", "missing type");
    const std::string type = msg["type"];
    if (type == "hello") {
      bound = mgr.get(msg.at("session").get<std::string>());
      if (on_hello) on_hello(bound);
      return {{"type", "hello"}, {"session", bound->id()}, {"mode", to_string(bound->mode())}};
    }
    if (!bound) return error("no_session", "send hello first");
    if (type == "cmd") {
      const std::int64_t seq = msg.at("seq").get<std::int64_t>();
      const CommandAck ack = bound->ingest_command(msg.at("v").get<double>(), msg.at("omega").get<double>(), seq);
      return {{"type", "ack"}, {"session", bound->id()}, {"seq", seq}, {"dropped", ack.dropped}};
    }
    if (type == "set") {
      bound->set(msg.at("key").get<std::string>(), msg.at("value"));
      return {{"type", "ack"}, {"session", bound->id()}, {"key", msg["key"]}};
    }
    if (type == "reset") {
      bound->reset();
      return {{"type", "ack"}, {"session", bound->id()}, {"reset", true}};
    }
    return error("bad_request", "unknown type '" + type + "'");
  } catch (const UnknownSession & e) {
    return error("unknown_session", e.what());
  } catch (const SessionNotRunning & e) {
    return error("session_not_running", e.what());
  } catch (const json::exception & e) {
    return error("bad_request", e.what());
  } catch (const std::invalid_argument & e) {
    return error("bad_request", e.what());
  }
}

}  // namespace blendmpc
