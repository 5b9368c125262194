// Command-line front end: run, batch, replay, validate.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <blendmpc/batch.hpp>

using namespace blendmpc;

namespace {

struct ConfigFlags
{
  double lambda{0.35};
  int horizon{100};
  double slack_weight{1e3};
  int max_sqp_iters{10};
  double gamma{0.1};
  std::string reference{"constant_goal"};
  double duration{120.0};
  std::string op{"rational"};
  double beta{50.0};
  std::vector<double> theta_true;
  bool one_tick_delay{false};
  bool rational_prediction{false};

  void add_to(CLI::App & app)
  {
    app.add_option("--lambda", lambda, "Arbitration weight in [0, 1]")->check(CLI::Range(0.0, 1.0));
    app.add_option("--horizon", horizon, "Prediction horizon N")->check(CLI::PositiveNumber);
    app.add_option("--slack-weight", slack_weight, "CBF slack weight w")->check(CLI::PositiveNumber);
    app.add_option("--max-sqp-iters", max_sqp_iters, "SQP iteration cap")->check(CLI::PositiveNumber);
    app.add_option("--gamma", gamma, "CBF decay rate in (0, 1)");
    app.add_option("--reference", reference, "constant_goal or straight_line")
      ->check(CLI::IsMember({"constant_goal", "straight_line"}));
    app.add_option("--duration", duration, "Episode duration limit in seconds")->check(CLI::NonNegativeNumber);
    app.add_option("--operator", op, "rational, boltzmann, scripted, idle");
    app.add_option("--beta", beta, "Boltzmann rationality coefficient")->check(CLI::NonNegativeNumber);
    app.add_option("--theta-true", theta_true, "Operator intent: theta1_xy theta1_yaw theta2 theta3")->expected(4);
    app.add_flag("--one-tick-delay", one_tick_delay, "Apply the previous tick's robot input");
    app.add_flag("--rational-prediction", rational_prediction, "Adapt against a fresh rational solve");
  }

  BatchConfig to_config() const
  {
    BatchConfig c;
    c.nmpc.lambda = c.blend.lambda = lambda;
    c.nmpc.horizon = horizon;
    c.nmpc.slack_weight = slack_weight;
    c.nmpc.max_sqp_iters = max_sqp_iters;
    c.nmpc.gamma = gamma;
    c.nmpc.reference = reference == "straight_line" ? ReferencePolicy::straight_line : ReferencePolicy::constant_goal;
    c.nmpc.validate();
    c.op.kind = operator_kind_from_string(op);
    c.op.beta.beta = beta;
    if (!theta_true.empty()) c.op.true_theta = IntentParams::tied(theta_true[0], theta_true[1], theta_true[2], theta_true[3]);
    c.options.one_tick_delay = one_tick_delay;
    c.options.rational_prediction = rational_prediction;
    c.duration_limit = duration;
    return c;
  }
};

/// Built-in name (lab_gA, lab_gB, open, random:<seed>) or path to a scenario JSON file.
Scenario resolve_scenario(const std::string & s)
{
  if (s == "lab_gA") return lab_scenario(false);
  if (s == "lab_gB") return lab_scenario(true);
  if (s == "open") return open_scenario();
  if (s.rfind("random:", 0) == 0) return random_scenario(std::stoull(s.substr(7)));
  return load_scenario(s);
}

void write_text(const std::string & path, const std::string & text)
{
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

int run(const ConfigFlags & flags, const std::string & scenario, std::uint64_t seed, const std::string & out)
{
  const BatchConfig c = flags.to_config();
  const Scenario sc = resolve_scenario(scenario);
  OperatorModel op = c.op;
  if (op.kind == OperatorKind::scripted_waypoints) op.waypoints = default_waypoints(sc);
  const EpisodeResult r = run_episode(sc, op, c.nmpc, c.blend, c.adapt, c.duration_limit, seed, c.options);
  if (!out.empty()) write_episode_log(out, r.trace);
  nlohmann::json j = metrics_json(r);
  j["scenario"] = sc.name;
  j["seed"] = seed;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int batch(
  const ConfigFlags & flags, std::vector<std::string> scenarios, int random_count, std::vector<double> lambdas,
  std::vector<double> weights, int reps, unsigned workers, std::uint64_t seed, const std::string & out)
{
  const BatchConfig base = flags.to_config();
  std::vector<Scenario> scs;
  for (const auto & s : scenarios) scs.push_back(resolve_scenario(s));
  for (int i = 0; i < random_count; ++i) scs.push_back(random_scenario(tick_seed(seed, -1 - i)));
  if (scs.empty()) scs.push_back(lab_scenario(false));
  if (lambdas.empty()) lambdas.push_back(base.nmpc.lambda);
  if (weights.empty()) weights.push_back(base.nmpc.slack_weight);

  const auto rows = run_batch(scs, make_grid(base, lambdas, weights), reps, seed, workers);
  const std::string csv = batch_csv(rows);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
  }
  for (const auto & s : summarize(rows)) {
    std::cerr << s.config_id << ": " << s.successes << "/" << s.episodes << " succeeded, " << s.errors
              << " errors, mean min distance " << s.mean_min_dist << " m, worst " << s.worst_min_dist << " m\n";
  }
  return 0;
}

int replay(const ConfigFlags & flags, const std::string & scenario, const std::string & log, const std::string & out)
{
  const BatchConfig c = flags.to_config();
  const Scenario sc = resolve_scenario(scenario);
  const auto recorded = read_episode_log(log);
  OperatorModel op = replay_operator(recorded);
  const double duration = static_cast<double>(recorded.size()) * c.nmpc.dynamics.ts;
  const EpisodeResult r = run_episode(sc, op, c.nmpc, c.blend, c.adapt, duration, 0, c.options);
  std::size_t diverged = recorded.size();
  for (std::size_t k = 0; k < std::min(recorded.size(), r.trace.size()); ++k) {
    if ((r.trace[k].next_state.vec() - recorded[k].next_state.vec()).cwiseAbs().maxCoeff() > 1e-9) {
      diverged = k;
      break;
    }
  }
  if (!out.empty()) write_episode_log(out, r.trace);
  nlohmann::json j = metrics_json(r);
  j["recorded_ticks"] = recorded.size();
  j["replayed_ticks"] = r.trace.size();
  j["first_divergent_tick"] = diverged < recorded.size() ? nlohmann::json(diverged) : nlohmann::json(nullptr);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int validate(const std::vector<std::string> & files)
{
  int bad = 0;
  for (const auto & f : files) {
    try {
      validate_scenario(load_scenario(f));
      std::cout << f << ": ok\n";
    } catch (const std::exception & e) {
      std::cout << f << ": " << e.what() << "\n";
      ++bad;
    }
  }
  return bad == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"Shared-autonomy NMPC simulator"};
  app.require_subcommand(1);
  std::uint64_t seed = 1;
  std::string out;

  ConfigFlags run_flags, batch_flags, replay_flags;
  std::string run_scenario = "lab_gA";
  auto * run_cmd = app.add_subcommand("run", "Simulate one episode and print its metrics");
  run_flags.add_to(*run_cmd);
  run_cmd->add_option("--scenario", run_scenario, "lab_gA, lab_gB, open, random:<seed> or a JSON file");
  run_cmd->add_option("--seed", seed, "Episode seed");
  run_cmd->add_option("--out", out, "Write the episode log (JSON lines) here");

  std::vector<std::string> batch_scenarios;
  std::vector<double> lambdas, weights;
  int random_count = 0, reps = 1;
  unsigned workers = 0;
  auto * batch_cmd = app.add_subcommand("batch", "Run a configuration grid and write a CSV table");
  batch_flags.add_to(*batch_cmd);
  batch_cmd->add_option("--scenarios", batch_scenarios, "Scenario names or files");
  batch_cmd->add_option("--random", random_count, "Add this many seeded random scenarios")->check(CLI::NonNegativeNumber);
  batch_cmd->add_option("--lambdas", lambdas, "Grid over lambda");
  batch_cmd->add_option("--slack-weights", weights, "Grid over the slack weight");
  batch_cmd->add_option("--reps", reps, "Repetitions per cell")->check(CLI::PositiveNumber);
  batch_cmd->add_option("--workers", workers, "Worker threads (0 = hardware concurrency)");
  batch_cmd->add_option("--seed", seed, "Base seed");
  batch_cmd->add_option("--out", out, "CSV path (stdout if omitted)");

  std::string replay_scenario = "lab_gA", log;
  auto * replay_cmd = app.add_subcommand("replay", "Re-run a recorded episode from its human commands");
  replay_flags.add_to(*replay_cmd);
  replay_cmd->add_option("--scenario", replay_scenario, "Scenario the log was recorded on");
  replay_cmd->add_option("--log", log, "Episode log (JSON lines)")->required()->check(CLI::ExistingFile);
  replay_cmd->add_option("--seed", seed, "Unused; accepted for symmetry");
  replay_cmd->add_option("--out", out, "Write the replayed log here");

  std::vector<std::string> files;
  auto * validate_cmd = app.add_subcommand("validate", "Check scenario files");
  validate_cmd->add_option("files", files, "Scenario JSON files")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run_cmd) return run(run_flags, run_scenario, seed, out);
    if (*batch_cmd) return batch(batch_flags, batch_scenarios, random_count, lambdas, weights, reps, workers, seed, out);
    if (*replay_cmd) return replay(replay_flags, replay_scenario, log, out);
    if (*validate_cmd) return validate(files);
  } catch (const std::exception & e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
