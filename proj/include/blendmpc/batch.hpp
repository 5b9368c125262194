#pragma once

// Batch runner over scenarios x configurations x seeds with bounded parallelism.

#include <atomic>
#include <cstdio>
#include <map>
#include <thread>

#include "simulation.hpp"

namespace blendmpc {

struct BatchConfig
{
  std::string id;
  NmpcConfig nmpc{};
  BlendConfig blend{};
  AdaptationConfig adapt{};
  OperatorModel op{};
  EpisodeOptions options{};
  double duration_limit{120.0};
};

struct BatchRow
{
  std::string scenario;
  std::uint64_t seed{0};
  std::string config_id;
  bool success{false};
  double time_to_goal{std::numeric_limits<double>::quiet_NaN()};
  double min_dist{std::numeric_limits<double>::infinity()};
  double path_length{0.0};
  double effort{0.0};
  double mean_tracking_error{0.0};
  std::string error;  ///< non-empty when the episode threw
};

/// Cross product of lambda and slack-weight values applied to a base configuration.
inline std::vector<BatchConfig> make_grid(
  const BatchConfig & base, const std::vector<double> & lambdas, const std::vector<double> & slack_weights)
{
  std::vector<BatchConfig> out;
  for (double lam : lambdas) {
    for (double w : slack_weights) {
      BatchConfig c = base;
      c.nmpc.lambda = lam;
      c.blend.lambda = lam;
      c.nmpc.slack_weight = w;
      char buf[64];
      std::snprintf(buf, sizeof(buf), "lambda=%g,w=%g", lam, w);
      c.id = buf;
      out.push_back(std::move(c));
    }
  }
  return out;
}

/// Seed of repetition r under a base seed.
inline std::uint64_t repetition_seed(std::uint64_t seed, int r) { return tick_seed(seed, r); }

/**
 * @brief Runs every (config, scenario, repetition) combination.
 *
 * Rows are ordered config-major, then scenario, then repetition, regardless of
 * the number of workers. An episode that throws becomes a row with `error` set.
 */
inline std::vector<BatchRow> run_batch(
  const std::vector<Scenario> & scenarios, const std::vector<BatchConfig> & configs, int repetitions, std::uint64_t seed,
  unsigned max_workers = 0)
{
  struct Job
  {
    std::size_t c, s;
    int r;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
      for (int r = 0; r < repetitions; ++r) jobs.push_back({c, s, r});
    }
  }
  std::vector<BatchRow> rows(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job & j = jobs[i];
      const BatchConfig & cfg = configs[j.c];
      BatchRow & row = rows[i];
      row.scenario = scenarios[j.s].name;
      row.seed = repetition_seed(seed, j.r);
      row.config_id = cfg.id;
      try {
        OperatorModel op = cfg.op;
        if (op.kind == OperatorKind::scripted_waypoints && op.waypoints.empty()) op.waypoints = default_waypoints(scenarios[j.s]);
        const EpisodeResult res =
          run_episode(scenarios[j.s], op, cfg.nmpc, cfg.blend, cfg.adapt, cfg.duration_limit, row.seed, cfg.options);
        row.success = res.success;
        row.time_to_goal = res.time_to_goal;
        row.min_dist = res.min_obstacle_distance;
        row.path_length = res.path_length;
        row.effort = res.human_effort;
        row.mean_tracking_error = res.mean_tracking_error;
      } catch (const std::exception & e) {
        row.error = e.what();
      }
    }
  };
  unsigned n = max_workers ? max_workers : std::max(1u, std::thread::hardware_concurrency());
  n = static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs.size(), 1)));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto & t : pool) t.join();
  return rows;
}

inline std::string batch_csv(const std::vector<BatchRow> & rows)
{
  auto num = [](double v) {
    if (!std::isfinite(v)) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return std::string(buf);
  };
  auto quote = [](const std::string & s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  std::string out = "scenario,seed,config_id,success,time_to_goal,min_dist,path_length,effort,error\n";
  for (const auto & r : rows) {
    out += quote(r.scenario) + "," + std::to_string(r.seed) + "," + quote(r.config_id) + "," + (r.success ? "1" : "0") + "," +
           num(r.time_to_goal) + "," + num(r.min_dist) + "," + num(r.path_length) + "," + num(r.effort) + "," + quote(r.error) +
           "\n";
  }
  return out;
}

struct BatchSummary
{
  std::string config_id;
  int episodes{0};
  int successes{0};
  int errors{0};
  double mean_min_dist{0.0};
  double worst_min_dist{std::numeric_limits<double>::infinity()};
};

/// Per-configuration aggregates in first-appearance order.
inline std::vector<BatchSummary> summarize(const std::vector<BatchRow> & rows)
{
  std::vector<BatchSummary> out;
  std::map<std::string, std::size_t> index;
  std::vector<int> finite_count;
  for (const auto & r : rows) {
    auto [it, fresh] = index.try_emplace(r.config_id, out.size());
    if (fresh) {
      out.push_back({r.config_id});
      finite_count.push_back(0);
    }
    BatchSummary & s = out[it->second];
    ++s.episodes;
    if (!r.error.empty()) {
      ++s.errors;
      continue;
    }
    s.successes += r.success ? 1 : 0;
    if (std::isfinite(r.min_dist)) {
      s.mean_min_dist += r.min_dist;
      ++finite_count[it->second];
      s.worst_min_dist = std::min(s.worst_min_dist, r.min_dist);
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (finite_count[i] > 0) out[i].mean_min_dist /= finite_count[i];
  }
  return out;
}

}  // namespace blendmpc
