#include "test_util.hpp"

#include <gtest/gtest.h>

#include <blendmpc/service.hpp>

using namespace blendmpc;
using namespace std::chrono_literals;

namespace {

/// Manually ticked sessions: no runner thread and no solve deadline.
SessionManager manual() { return SessionManager(ScenarioRegistry{}, false); }

void run(Session & s) { s.set("paused", false); }

}  // namespace

TEST(Session, CreatedPausedAtStartPose)
{
  auto mgr = manual();
  auto s = mgr.create("lab_gA");
  EXPECT_EQ(s->id(), "s0001");
  EXPECT_EQ(s->mode(), SessionMode::paused);
  EXPECT_EQ(s->summary()["tick"], 0);
  EXPECT_EQ(s->summary()["lambda"], 0.35);
  EXPECT_TRUE(s->tick().empty());
  EXPECT_EQ(mgr.create("open")->id(), "s0002");
  EXPECT_THROW(mgr.create("mars"), UnknownScenario);
  EXPECT_THROW(mgr.get("s0099"), UnknownSession);
}

TEST(Session, OverridesApply)
{
  auto mgr = manual();
  auto s = mgr.create("open", {{"lambda", 0.0}, {"horizon", 40}});
  EXPECT_EQ(s->config().blend.lambda, 0.0);
  EXPECT_EQ(s->config().nmpc.lambda, 0.0);
  EXPECT_EQ(s->config().nmpc.horizon, 40);
  EXPECT_THROW(mgr.create("open", {{"colour", 1}}), std::invalid_argument);
  EXPECT_THROW(mgr.create("open", {{"lambda", "high"}}), std::invalid_argument);
  EXPECT_THROW(mgr.create("open", {{"lambda", 2.0}}), std::invalid_argument);
}

TEST(Session, BaselineOverridePassesCommandsThrough)
{
  auto mgr = manual();
  auto s = mgr.create("open", {{"lambda", 0.0}, {"horizon", 30}});
  run(*s);
  const auto now = Clock::now();
  s->ingest_command(0.3, 0.1, 1, now);
  const auto frames = s->tick(now + 50ms);
  ASSERT_EQ(frames.size(), 1u);
  EXPECT_DOUBLE_EQ(frames[0]["u_applied"]["v"], 0.3);
  EXPECT_DOUBLE_EQ(frames[0]["u_applied"]["omega"], 0.1);
  EXPECT_EQ(frames[0]["lambda_effective"], 0.0);
}

TEST(Session, CommandsRequireRunningSession)
{
  auto mgr = manual();
  auto s = mgr.create("open");
  EXPECT_THROW(s->ingest_command(0.3, 0.0, 1), SessionNotRunning);
  run(*s);
  EXPECT_FALSE(s->ingest_command(0.3, 0.0, 1).dropped);
  EXPECT_THROW(s->ingest_command(std::nan(""), 0.0, 2), std::invalid_argument);
}

TEST(Session, OutOfOrderCommandsDropped)
{
  auto mgr = manual();
  auto s = mgr.create("open", {{"horizon", 30}});
  run(*s);
  const auto now = Clock::now();
  EXPECT_FALSE(s->ingest_command(0.3, 0.0, 5, now).dropped);
  EXPECT_TRUE(s->ingest_command(-0.3, 0.0, 4, now).dropped);
  EXPECT_TRUE(s->ingest_command(-0.3, 0.0, 5, now).dropped);
  const auto frames = s->tick(now);
  EXPECT_DOUBLE_EQ(frames[0]["uH"]["v"], 0.3);
}

TEST(Session, StaleCommandCountsAsZero)
{
  auto mgr = manual();
  auto s = mgr.create("open", {{"horizon", 30}});
  run(*s);
  const auto t0 = Clock::now();
  s->ingest_command(0.3, 0.2, 1, t0);
  EXPECT_DOUBLE_EQ(s->tick(t0 + 250ms)[0]["uH"]["v"], 0.3);
  const auto late = s->tick(t0 + 350ms)[0];
  EXPECT_DOUBLE_EQ(late["uH"]["v"], 0.0);
  EXPECT_DOUBLE_EQ(late["uH"]["omega"], 0.0);
  EXPECT_EQ(late["lambda_effective"], 1.0);
}

TEST(Session, IdleSessionMatchesZeroOperatorEpisode)
{
  auto mgr = manual();
  auto s = mgr.create("lab_gA");
  run(*s);
  const int n = 30;
  for (int k = 0; k < n; ++k) s->tick();
  const auto trace = s->trace();
  OperatorModel zero;
  zero.kind = OperatorKind::idle;
  const EpisodeResult ref =
    run_episode(lab_scenario(), zero, NmpcConfig{}, BlendConfig{}, AdaptationConfig{}, n * 0.1, 0);
  ASSERT_EQ(trace.size(), ref.trace.size());
  for (std::size_t k = 0; k < trace.size(); ++k) EXPECT_TRUE(trace[k].same_outcome(ref.trace[k])) << k;
}

TEST(Session, StateFrameCarriesProtocolFields)
{
  auto mgr = manual();
  auto s = mgr.create("lab_gB");
  run(*s);
  const auto f = s->tick()[0];
  for (const char * key : {"type", "session", "seq", "t", "tick", "robot", "uH", "uH_pred", "uR", "u_applied",
                           "lambda_effective", "theta_hat", "h_min", "psi_min", "goal", "obstacles_digest", "horizon",
                           "solver", "mode"}) {
    EXPECT_TRUE(f.contains(key)) << key;
  }
  EXPECT_EQ(f["type"], "state");
  EXPECT_EQ(f["session"], s->id());
  EXPECT_EQ(f["theta_hat"].size(), 5u);
  EXPECT_EQ(f["horizon"].size(), 21u);
  EXPECT_TRUE(f["solver"].contains("iters"));
  EXPECT_TRUE(f["solver"].contains("time_ms"));
  EXPECT_EQ(f["goal"]["y"], 1.2);
  EXPECT_EQ(f["obstacles_digest"], obstacles_digest(lab_scenario(true).obstacles));
  EXPECT_NE(f["obstacles_digest"], obstacles_digest(open_scenario().obstacles));
  EXPECT_EQ(f["obstacles_digest"].get<std::string>().size(), 16u);
  EXPECT_EQ(f["mode"], "running");
}

TEST(Session, HorizonPreviewTakesEveryFifthKnot)
{
  HorizonSolution sol;
  for (int k = 0; k <= 100; ++k) sol.states.push_back({0.1 * k, 0.0, 0.0});
  sol.robot_inputs.resize(100);
  const auto h = horizon_preview(sol);
  ASSERT_EQ(h.size(), 21u);
  EXPECT_DOUBLE_EQ(h[1]["x"], 0.5);
  EXPECT_DOUBLE_EQ(h[20]["x"], 10.0);
}

TEST(Session, FinishEmitsResultAndSeqIsGapFree)
{
  auto mgr = manual();
  auto s = mgr.create("open", {{"horizon", 30}, {"duration_limit", 1.0}});
  run(*s);
  std::vector<nlohmann::json> all;
  for (int k = 0; k < 15; ++k) {
    for (auto & f : s->tick()) all.push_back(f);
  }
  ASSERT_EQ(all.size(), 11u);
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i]["seq"], i);
  EXPECT_EQ(all.back()["type"], "result");
  EXPECT_EQ(all.back()["session"], s->id());
  EXPECT_TRUE(all.back()["metrics"].contains("success"));
  EXPECT_EQ(all[9]["mode"], "finished");
  EXPECT_EQ(s->mode(), SessionMode::finished);
  s->set("paused", false);
  EXPECT_EQ(s->mode(), SessionMode::finished);
}

TEST(Session, ResetReturnsToStartAndKeepsSeq)
{
  auto mgr = manual();
  auto s = mgr.create("open", {{"horizon", 30}});
  run(*s);
  s->tick();
  s->tick();
  s->reset();
  EXPECT_EQ(s->mode(), SessionMode::paused);
  EXPECT_TRUE(s->trace().empty());
  run(*s);
  const auto f = s->tick()[0];
  EXPECT_EQ(f["seq"], 2);
  EXPECT_EQ(f["tick"], 0);
}

TEST(Session, SetLambdaChangesArbitration)
{
  auto mgr = manual();
  auto s = mgr.create("open", {{"horizon", 30}});
  run(*s);
  s->set("lambda", 0.0);
  const auto now = Clock::now();
  s->ingest_command(0.25, 0.0, 1, now);
  EXPECT_DOUBLE_EQ(s->tick(now)[0]["u_applied"]["v"], 0.25);
  EXPECT_THROW(s->set("lambda", 3.0), std::invalid_argument);
  EXPECT_THROW(s->set("gain", 1.0), std::invalid_argument);
  EXPECT_THROW(s->set("paused", 1.0), std::invalid_argument);
}

TEST(Session, ConcurrentSessionsAreIsolated)
{
  // Interleaved random commands to two sessions must give the same traces as
  // running each alone.
  std::mt19937_64 rng(3);
  const int n = 15;
  std::vector<std::array<double, 2>> cmds_a, cmds_b;
  for (int k = 0; k < n; ++k) {
    cmds_a.push_back({test::uniform(rng, -0.4, 0.4), test::uniform(rng, -0.8, 0.8)});
    cmds_b.push_back({test::uniform(rng, -0.4, 0.4), test::uniform(rng, -0.8, 0.8)});
  }
  const nlohmann::json ov{{"horizon", 30}};
  auto drive = [&](Session & s, const std::vector<std::array<double, 2>> & cmds, int k, Clock::time_point t) {
    s.ingest_command(cmds[k][0], cmds[k][1], k, t);
    s.tick(t);
  };
  auto mgr = manual();
  auto a = mgr.create("lab_gA", ov), b = mgr.create("lab_gB", ov);
  run(*a);
  run(*b);
  const auto t0 = Clock::now();
  for (int k = 0; k < n; ++k) {
    const auto t = t0 + k * 100ms;
    if (rng() % 2) {
      drive(*a, cmds_a, k, t);
      drive(*b, cmds_b, k, t);
    } else {
      drive(*b, cmds_b, k, t);
      drive(*a, cmds_a, k, t);
    }
  }
  auto solo_a = mgr.create("lab_gA", ov), solo_b = mgr.create("lab_gB", ov);
  run(*solo_a);
  run(*solo_b);
  for (int k = 0; k < n; ++k) drive(*solo_a, cmds_a, k, t0 + k * 100ms);
  for (int k = 0; k < n; ++k) drive(*solo_b, cmds_b, k, t0 + k * 100ms);
  const auto ta = a->trace(), tb = b->trace(), sa = solo_a->trace(), sb = solo_b->trace();
  ASSERT_EQ(ta.size(), sa.size());
  ASSERT_EQ(tb.size(), sb.size());
  for (std::size_t k = 0; k < ta.size(); ++k) {
    EXPECT_TRUE(ta[k].same_outcome(sa[k])) << k;
    EXPECT_TRUE(tb[k].same_outcome(sb[k])) << k;
  }
}

TEST(Session, PublishFansOutToSubscribers)
{
  auto mgr = manual();
  auto s = mgr.create("open");
  int a = 0, b = 0;
  const auto ha = s->subscribe([&](const nlohmann::json &) { ++a; });
  s->subscribe([&](const nlohmann::json &) { ++b; });
  s->publish({{"type", "state"}});
  s->unsubscribe(ha);
  s->publish({{"type", "state"}});
  EXPECT_EQ(a, 1);
  EXPECT_EQ(b, 2);
}

TEST(Session, LogIsEpisodeJsonLines)
{
  auto mgr = manual();
  auto s = mgr.create("open", {{"horizon", 30}});
  run(*s);
  for (int k = 0; k < 3; ++k) s->tick();
  const auto back = parse_episode_log(s->log());
  ASSERT_EQ(back.size(), 3u);
  EXPECT_TRUE(back[2].same_outcome(s->trace()[2]));
}

TEST(Manager, ListAndRemove)
{
  auto mgr = manual();
  mgr.create("open");
  mgr.create("lab_gA");
  EXPECT_EQ(mgr.list().size(), 2u);
  mgr.remove("s0001");
  EXPECT_EQ(mgr.list().size(), 1u);
  EXPECT_EQ(mgr.list()[0]["scenario"], "lab_gA");
  EXPECT_THROW(mgr.remove("s0001"), UnknownSession);
}

TEST(Registry, BuiltInsAndValidation)
{
  ScenarioRegistry reg;
  EXPECT_EQ(reg.names(), (std::vector<std::string>{"lab_gA", "lab_gB", "open"}));
  Scenario bad = open_scenario();
  bad.name = "bad";
  bad.goal.gx = 99;
  EXPECT_THROW(reg.add(bad), ValidationError);
  reg.add(random_scenario(1));
  EXPECT_NO_THROW(reg.get("random_1"));
  EXPECT_THROW(reg.get("nope"), UnknownScenario);
}

TEST(ClientMessages, HelloCommandSetReset)
{
  auto mgr = manual();
  auto s = mgr.create("open", {{"horizon", 30}});
  std::shared_ptr<Session> bound;
  auto reply = handle_client_message(mgr, {{"type", "cmd"}, {"v", 0.1}, {"omega", 0.0}, {"seq", 1}}, bound);
  EXPECT_EQ(reply["type"], "error");
  EXPECT_EQ(reply["code"], "no_session");

  reply = handle_client_message(mgr, {{"type", "hello"}, {"session", "s0042"}}, bound);
  EXPECT_EQ(reply["code"], "unknown_session");

  bool hooked = false;
  reply = handle_client_message(mgr, {{"type", "hello"}, {"session", s->id()}}, bound, [&](auto &) { hooked = true; });
  EXPECT_EQ(reply, (nlohmann::json{{"type", "hello"}, {"session", "s0001"}, {"mode", "paused"}}));
  EXPECT_TRUE(hooked);

  reply = handle_client_message(mgr, {{"type", "cmd"}, {"v", 0.1}, {"omega", 0.0}, {"seq", 1}}, bound);
  EXPECT_EQ(reply["code"], "session_not_running");

  reply = handle_client_message(mgr, {{"type", "set"}, {"key", "paused"}, {"value", false}}, bound);
  EXPECT_EQ(reply["type"], "ack");
  EXPECT_EQ(s->mode(), SessionMode::running);

  reply = handle_client_message(mgr, {{"type", "cmd"}, {"v", 0.1}, {"omega", 0.0}, {"seq", 7}}, bound);
  EXPECT_EQ(reply, (nlohmann::json{{"type", "ack"}, {"session", "s0001"}, {"seq", 7}, {"dropped", false}}));
  reply = handle_client_message(mgr, {{"type", "cmd"}, {"v", 0.1}, {"omega", 0.0}, {"seq", 6}}, bound);
  EXPECT_EQ(reply["dropped"], true);

  reply = handle_client_message(mgr, {{"type", "set"}, {"key", "lambda"}, {"value", 0.5}}, bound);
  EXPECT_EQ(reply["key"], "lambda");
  EXPECT_EQ(s->summary()["lambda"], 0.5);

  reply = handle_client_message(mgr, {{"type", "reset"}}, bound);
  EXPECT_EQ(reply["reset"], true);
  EXPECT_EQ(s->mode(), SessionMode::paused);

  for (const nlohmann::json & m : {nlohmann::json{{"type", "warp"}}, nlohmann::json{{"type", "cmd"}, {"v", "fast"}},
                                   nlohmann::json::array(), nlohmann::json{{"type", "set"}, {"key", "gain"}, {"value", 1}}}) {
    EXPECT_EQ(handle_client_message(mgr, m, bound)["code"], "bad_request") << m;
  }
}

TEST(Runner, RealtimeSessionTicksWhileRunning)
{
  SessionManager mgr;
  auto s = mgr.create("open", {{"horizon", 30}});
  std::atomic<int> frames{0};
  s->subscribe([&](const nlohmann::json &) { ++frames; });
  std::this_thread::sleep_for(300ms);
  EXPECT_EQ(frames.load(), 0);
  s->set("paused", false);
  std::this_thread::sleep_for(650ms);
  s->set("paused", true);
  std::this_thread::sleep_for(200ms);
  const int seen = frames.load();
  EXPECT_GE(seen, 5);
  EXPECT_LE(seen, 8);
  EXPECT_EQ(static_cast<int>(s->trace().size()), seen);
}
