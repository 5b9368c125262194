#include "test_util.hpp"

#include <gtest/gtest.h>

#include <blendmpc/arbitration.hpp>

using namespace blendmpc;
using namespace blendmpc::test;

TEST(Blend, LambdaZeroPassesHumanCommandThrough)
{
  BlendConfig cfg;
  cfg.lambda = 0.0;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const VelocityCommand uH{uniform(rng, -0.4, 0.4), uniform(rng, -0.8, 0.8)};
    const VelocityCommand uR{uniform(rng, -0.4, 0.4), uniform(rng, -0.8, 0.8)};
    const BlendResult r = blend(uR, uH, cfg);
    if (cfg.deadband.contains(uH)) continue;
    EXPECT_EQ(r.u, uH);
    EXPECT_EQ(r.lambda_effective, 0.0);
  }
}

TEST(Blend, LambdaZeroClampsOutOfRangeHumanCommand)
{
  BlendConfig cfg;
  cfg.lambda = 0.0;
  const BlendResult r = blend({}, {0.9, -1.5}, cfg);
  EXPECT_EQ(r.u.v, 0.4);
  EXPECT_EQ(r.u.omega, -0.8);
}

TEST(Blend, LambdaOneIgnoresHuman)
{
  BlendConfig cfg;
  cfg.lambda = 1.0;
  std::mt19937_64 rng(2);
  for (int i = 0; i < 200; ++i) {
    const VelocityCommand uR{uniform(rng, -0.4, 0.4), uniform(rng, -0.8, 0.8)};
    const VelocityCommand uH{uniform(rng, -0.4, 0.4), uniform(rng, -0.8, 0.8)};
    EXPECT_EQ(blend(uR, uH, cfg).u, uR);
  }
}

TEST(Blend, ConvexCombinationInsideTheBox)
{
  const BlendResult r = blend({0.4, -0.8}, {0.2, 0.4}, BlendConfig{});
  EXPECT_NEAR(r.u.v, 0.35 * 0.4 + 0.65 * 0.2, 1e-15);
  EXPECT_NEAR(r.u.omega, 0.35 * -0.8 + 0.65 * 0.4, 1e-15);
  EXPECT_EQ(r.lambda_effective, 0.35);
}

TEST(Blend, DeadbandHandsControlToRobot)
{
  const BlendConfig cfg;
  const VelocityCommand uR{0.3, 0.2};
  for (const VelocityCommand uH : {VelocityCommand{0.0, 0.0}, VelocityCommand{0.02, -0.04}, VelocityCommand{-0.01, 0.03}}) {
    const BlendResult r = blend(uR, uH, cfg);
    EXPECT_EQ(r.lambda_effective, 1.0);
    EXPECT_EQ(r.u, uR);
  }
  EXPECT_EQ(blend(uR, {0.021, 0.0}, cfg).lambda_effective, 0.35);
  EXPECT_EQ(blend(uR, {0.0, 0.041}, cfg).lambda_effective, 0.35);
}

TEST(Blend, ValidationRejectsBadLambda)
{
  BlendConfig cfg;
  cfg.lambda = 1.2;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.lambda = -0.1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
