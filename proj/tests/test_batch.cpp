#include "test_util.hpp"

#include <gtest/gtest.h>

#include <blendmpc/batch.hpp>

using namespace blendmpc;

namespace {

BatchConfig quick_base()
{
  BatchConfig b;
  b.id = "base";
  b.nmpc.horizon = 20;
  b.op.kind = OperatorKind::boltzmann;
  b.duration_limit = 1.5;
  return b;
}

bool same_row(const BatchRow & a, const BatchRow & b)
{
  auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
  return a.scenario == b.scenario && a.seed == b.seed && a.config_id == b.config_id && a.success == b.success &&
         same(a.time_to_goal, b.time_to_goal) && a.min_dist == b.min_dist && a.path_length == b.path_length &&
         a.effort == b.effort && a.mean_tracking_error == b.mean_tracking_error && a.error == b.error;
}

}  // namespace

TEST(Batch, GridIsCrossProduct)
{
  const auto grid = make_grid(quick_base(), {0.1, 0.35, 0.5}, {10, 1e3, 1e4});
  ASSERT_EQ(grid.size(), 9u);
  EXPECT_EQ(grid[0].id, "lambda=0.1,w=10");
  EXPECT_EQ(grid[4].id, "lambda=0.35,w=1000");
  EXPECT_EQ(grid[8].nmpc.slack_weight, 1e4);
  EXPECT_EQ(grid[8].blend.lambda, 0.5);
  EXPECT_EQ(grid[8].nmpc.lambda, 0.5);
}

TEST(Batch, ResultsIndependentOfWorkerCount)
{
  const std::vector<Scenario> scenarios{lab_scenario(false), random_scenario(2)};
  const auto configs = make_grid(quick_base(), {0.1, 0.5}, {1e3});
  const auto serial = run_batch(scenarios, configs, 2, 11, 1);
  const auto parallel = run_batch(scenarios, configs, 2, 11, 4);
  ASSERT_EQ(serial.size(), 8u);
  ASSERT_EQ(parallel.size(), serial.size());
  for (std::size_t i = 0; i < serial.size(); ++i) EXPECT_TRUE(same_row(serial[i], parallel[i])) << i;
  EXPECT_EQ(serial[0].config_id, "lambda=0.1,w=1000");
  EXPECT_EQ(serial[0].scenario, "lab_gA");
  EXPECT_EQ(serial[1].seed, repetition_seed(11, 1));
  EXPECT_EQ(serial[2].scenario, "random_2");
  EXPECT_EQ(serial[4].config_id, "lambda=0.5,w=1000");
}

TEST(Batch, FailingEpisodeBecomesRow)
{
  BatchConfig bad = quick_base();
  bad.id = "bad";
  bad.nmpc.horizon = 0;
  const auto rows = run_batch({open_scenario()}, {bad, quick_base()}, 1, 1, 2);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].error.empty());
  EXPECT_FALSE(rows[0].success);
  EXPECT_TRUE(rows[1].error.empty());
}

TEST(Batch, CsvHasHeaderAndOneLinePerRow)
{
  BatchRow r;
  r.scenario = "open";
  r.seed = 3;
  r.config_id = "lambda=0.35,w=1000";
  r.success = true;
  r.time_to_goal = 21.5;
  r.min_dist = 1.25;
  r.path_length = 6.5;
  r.effort = 0.5;
  BatchRow f = r;
  f.success = false;
  f.time_to_goal = std::numeric_limits<double>::quiet_NaN();
  f.error = "boom, with comma";
  const std::string csv = batch_csv({r, f});
  std::istringstream in(csv);
  std::string header, l1, l2, extra;
  std::getline(in, header);
  std::getline(in, l1);
  std::getline(in, l2);
  EXPECT_EQ(header, "scenario,seed,config_id,success,time_to_goal,min_dist,path_length,effort,error");
  EXPECT_EQ(l1.rfind("open,3,\"lambda=0.35,w=1000\",1,21.5,", 0), 0u) << l1;
  EXPECT_NE(l2.find("\"boom, with comma\""), std::string::npos) << l2;
  EXPECT_FALSE(std::getline(in, extra) && !extra.empty());
}

TEST(Batch, SummaryAggregatesPerConfig)
{
  std::vector<BatchRow> rows(4);
  for (int i = 0; i < 4; ++i) {
    rows[i].config_id = i < 2 ? "a" : "b";
    rows[i].success = i != 1;
    rows[i].min_dist = 0.5 + 0.1 * i;
    rows[i].time_to_goal = rows[i].success ? 10.0 * (i + 1) : std::numeric_limits<double>::quiet_NaN();
  }
  const auto s = summarize(rows);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].config_id, "a");
  EXPECT_EQ(s[0].episodes, 2);
  EXPECT_EQ(s[0].successes, 1);
  EXPECT_EQ(s[1].successes, 2);
  EXPECT_NEAR(s[0].mean_min_dist, 0.55, 1e-12);
  EXPECT_NEAR(s[1].worst_min_dist, 0.7, 1e-12);
}
