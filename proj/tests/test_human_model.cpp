#include "test_util.hpp"

#include <gtest/gtest.h>

#include <blendmpc/human_model.hpp>

using namespace blendmpc;
using namespace blendmpc::test;

namespace {

struct Instance
{
  RobotState x;
  GoalPose goal;
  ObstacleSet obs;
  IntentParams theta;
};

Instance random_instance(std::mt19937_64 & rng, int n_obstacles)
{
  Instance in;
  in.x = {uniform(rng, 0, 8), uniform(rng, 0, 5), uniform(rng, -3.1, 3.1)};
  in.goal = {uniform(rng, 0, 8), uniform(rng, 0, 5), uniform(rng, -3.1, 3.1)};
  for (int i = 0; i < n_obstacles; ++i) {
    Vec2 o;
    do {
      o = {uniform(rng, 0, 8), uniform(rng, 0, 5)};
    } while ((o - in.x.position()).norm() < 0.3);
    in.obs.centers.push_back(o);
  }
  in.theta = IntentParams::untied(uniform(rng, 0.1, 3), uniform(rng, 0.1, 3), uniform(rng, 0.1, 5), uniform(rng, 0.2, 3),
                                  uniform(rng, 0.01, 2));
  return in;
}

Eigen::VectorXd q_at(const Instance & in, const Eigen::VectorXd & u)
{
  Eigen::VectorXd q(1);
  q[0] = q_value(in.x, VelocityCommand::from(u), in.theta, in.goal, in.obs, {});
  return q;
}

}  // namespace

TEST(IntentParams, TiedAndUntiedConstructionAndBounds)
{
  const IntentParams t = IntentParams::tied(1.0, 2.0, 3.0, 4.0);
  EXPECT_EQ(t.vec(), (Vec5() << 1.0, 1.0, 2.0, 3.0, 4.0).finished());
  EXPECT_THROW(IntentParams::tied(1e-4, 1.0, 1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(IntentParams::untied(1.0, 1.0, 1.0, 1.0, std::nan("")), std::invalid_argument);
  EXPECT_NO_THROW(IntentParams::tied(1e-3, 1e-3, 1e-3, 1e-3));
}

TEST(QValue, ClosedFormWithoutObstacles)
{
  const RobotState x{1.0, 2.0, 0.0};
  const GoalPose g{3.0, 2.0, 0.5};
  const IntentParams th = IntentParams::untied(2.0, 3.0, 4.0, 5.0, 6.0);
  const VelocityCommand u{0.2, 0.3};
  // Next pose (1.02, 2.0, 0.03); error (-1.98, 0, -0.47).
  const double expected = 2.0 * 1.98 * 1.98 + 4.0 * 0.47 * 0.47 + 5.0 * (0.04 + 0.09);
  EXPECT_NEAR(q_value(x, u, th, g, ObstacleSet{}, {}), expected, 1e-12);
}

TEST(QValue, BarrierTermIsZeroAtThreshold)
{
  const RobotState x{0.0, 0.0, 0.0};
  const GoalPose g{0.0, 0.0, 0.0};
  const IntentParams th = IntentParams::tied(1e-3, 1e-3, 1e-3, 7.0);
  ObstacleSet obs{{{0.5, 0.0}}, 0.5};
  // u = 0 keeps the robot exactly d_th from the center.
  EXPECT_NEAR(q_value(x, {0.0, 0.0}, th, g, obs, {}), 0.0, 1e-15);
  EXPECT_GT(q_value(x, {0.4, 0.0}, th, g, obs, {}), 0.0);
}

TEST(Stationarity, PhiIsGradientOfQ)
{
  std::mt19937_64 rng(101);
  for (int i = 0; i < 100; ++i) {
    const Instance in = random_instance(rng, 1 + i % 3);
    const Vec2 u{uniform(rng, -0.4, 0.4), uniform(rng, -0.8, 0.8)};
    const Vec2 phi = phi_residual(in.x, VelocityCommand::from(u), in.theta, in.goal, in.obs, {});
    const Eigen::MatrixXd g = fd_jacobian([&](const Eigen::VectorXd & z) { return q_at(in, z); }, u, 1e-6).transpose();
    EXPECT_LT(rel_err(phi, g, 1e-3), 1e-5) << "sample " << i;
  }
}

TEST(Stationarity, JacobiansMatchFiniteDifferences)
{
  std::mt19937_64 rng(202);
  const DynamicsConfig dcfg;
  for (int i = 0; i < 100; ++i) {
    const Instance in = random_instance(rng, 1 + i % 3);
    const VelocityCommand u{uniform(rng, -0.4, 0.4), uniform(rng, -0.8, 0.8)};
    const StationarityEval ev = evaluate_stationarity(in.x, u, in.theta, in.goal, in.obs, dcfg);

    const auto fu = [&](const Eigen::VectorXd & z) -> Eigen::VectorXd {
      return phi_residual(in.x, VelocityCommand::from(z), in.theta, in.goal, in.obs, dcfg);
    };
    const auto fx = [&](const Eigen::VectorXd & z) -> Eigen::VectorXd {
      return phi_residual(RobotState::from(z), u, in.theta, in.goal, in.obs, dcfg);
    };
    const auto ft = [&](const Eigen::VectorXd & z) -> Eigen::VectorXd {
      return phi_residual(in.x, u, IntentParams::from(z), in.goal, in.obs, dcfg);
    };
    EXPECT_LT(rel_err(ev.d_u, fd_jacobian(fu, u.vec())), 1e-5) << "sample " << i;
    EXPECT_LT(rel_err(ev.d_x, fd_jacobian(fx, in.x.vec())), 1e-5) << "sample " << i;
    EXPECT_LT(rel_err(ev.d_theta, fd_jacobian(ft, in.theta.vec())), 1e-5) << "sample " << i;
    EXPECT_TRUE(ev.d_u.isApprox(ev.d_u.transpose(), 1e-12));
  }
}

TEST(Stationarity, DomainErrorAtObstacleCenterUnlessClamped)
{
  const RobotState x{0.0, 0.0, 0.0};
  ObstacleSet obs{{{0.0, 0.0}}, 0.5};
  const IntentParams th;
  EXPECT_THROW(phi_residual(x, {0.0, 0.0}, th, {1.0, 0.0, 0.0}, obs, {}), DomainError);
  const StationarityEval ev = evaluate_stationarity(x, {0.0, 0.0}, th, {1.0, 0.0, 0.0}, obs, {}, 1e-12);
  EXPECT_TRUE(ev.phi.allFinite());
}

TEST(RationalAction, ClosedFormWithoutObstacles)
{
  // Without obstacles phi is linear in u: (B'M1B + M2) u = -B'M1 (x - g).
  const RobotState x{1.0, 2.0, 0.3};
  const GoalPose g{3.0, 1.0, -0.4};
  const IntentParams th = IntentParams::untied(2.0, 1.5, 3.0, 0.7, 1.0);
  const Mat32 B = input_matrix(x, 0.1);
  Vec3 e0 = x.vec() - g.vec();
  const Vec2 expected =
    -(B.transpose() * th.m1() * B + th.m2()).ldlt().solve(B.transpose() * th.m1() * e0);
  const VelocityCommand u = solve_rational_action(x, th, g, ObstacleSet{}, {});
  EXPECT_LT((u.vec() - expected).norm(), 1e-10);
}

TEST(RationalAction, MatchesBruteForceGridMinimum)
{
  std::mt19937_64 rng(303);
  const DynamicsConfig dcfg;
  const ActionGrid grid{InputBox{}, 401};
  const double cell_v = 2.0 * grid.box.v_max / (grid.cells_per_axis - 1);
  const double cell_w = 2.0 * grid.box.omega_max / (grid.cells_per_axis - 1);
  int accepted = 0, drawn = 0;
  while (accepted < 100) {
    ASSERT_LT(++drawn, 5000);
    const Instance in = random_instance(rng, 1);
    int bi = 0, bj = 0;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < grid.cells_per_axis; ++i) {
      for (int j = 0; j < grid.cells_per_axis; ++j) {
        const double q = q_value(in.x, {grid.v_at(i), grid.omega_at(j)}, in.theta, in.goal, in.obs, dcfg);
        if (q < best) {
          best = q;
          bi = i;
          bj = j;
        }
      }
    }
    // Only interior minima are stationary points.
    if (bi == 0 || bj == 0 || bi == grid.cells_per_axis - 1 || bj == grid.cells_per_axis - 1) continue;
    ++accepted;
    const RationalSolveResult r = solve_rational_action_detailed(in.x, in.theta, in.goal, in.obs, dcfg, {});
    EXPECT_LT(r.residual_norm, 1e-8);
    EXPECT_LE(std::abs(r.u.v - grid.v_at(bi)), cell_v) << "instance " << accepted;
    EXPECT_LE(std::abs(r.u.omega - grid.omega_at(bj)), cell_w) << "instance " << accepted;
  }
}

TEST(RationalAction, ConvergenceErrorWhenIterationsExhausted)
{
  const RobotState x{0.0, 0.0, 0.0};
  ObstacleSet obs{{{0.3, 0.05}}, 0.5};
  RationalSolveOptions opt;
  opt.max_iterations = 0;
  EXPECT_THROW(solve_rational_action_detailed(x, IntentParams{}, {4.0, 0.0, 0.0}, obs, {}, {}, opt), ConvergenceError);
}

TEST(Boltzmann, ZeroBetaIsUniform)
{
  const RobotState x{1.0, 1.0, 0.2};
  ObstacleSet obs{{{2.0, 1.0}}, 0.5};
  const auto w = boltzmann_weights(x, IntentParams{}, {0.0}, {5.0, 1.0, 0.0}, obs, {}, ActionGrid{{}, 21});
  ASSERT_EQ(w.size(), 21u * 21u);
  for (double wi : w) EXPECT_DOUBLE_EQ(wi, 1.0);

  // Empirical check of the sampler: v-index frequencies are flat.
  std::vector<int> counts(21, 0);
  const int n = 21000;
  for (int s = 0; s < n; ++s) {
    const VelocityCommand u = sample_boltzmann_action(x, IntentParams{}, {0.0}, {5.0, 1.0, 0.0}, obs, {}, s, ActionGrid{{}, 21});
    ++counts[static_cast<std::size_t>(std::lround((u.v + 0.4) / 0.04))];
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - 1000.0) * (c - 1000.0) / 1000.0;
  EXPECT_LT(chi2, 45.3);  // 99.9th percentile of chi-square with 20 dof
}

TEST(Boltzmann, SamplerFollowsWeights)
{
  const RobotState x{1.0, 1.0, 0.2};
  const IntentParams th = IntentParams::tied(1.0, 1.0, 1.0, 0.1);
  const GoalPose g{3.0, 1.0, 0.0};
  const ActionGrid grid{{}, 11};
  const auto w = boltzmann_weights(x, th, {50.0}, g, ObstacleSet{}, {}, grid);
  double total = 0.0;
  for (double wi : w) total += wi;
  std::vector<double> freq(w.size(), 0.0);
  const int n = 20000;
  for (int s = 0; s < n; ++s) {
    const VelocityCommand u = sample_boltzmann_action(x, th, {50.0}, g, ObstacleSet{}, {}, 1000 + s, grid);
    const auto i = std::lround((u.v + 0.4) / 0.08), j = std::lround((u.omega + 0.8) / 0.16);
    freq[static_cast<std::size_t>(i * 11 + j)] += 1.0 / n;
  }
  double tv = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) tv += 0.5 * std::abs(freq[k] - w[k] / total);
  EXPECT_LT(tv, 0.03);
}

TEST(Boltzmann, LargeBetaConcentratesOnGridMinimum)
{
  const RobotState x{1.0, 1.0, 0.0};
  const IntentParams th = IntentParams::tied(2.0, 1.0, 0.3, 0.05);
  const GoalPose g{5.0, 1.0, 0.0};
  for (int s = 0; s < 20; ++s) {
    const VelocityCommand u = sample_boltzmann_action(x, th, {1e6}, g, ObstacleSet{}, {}, s);
    EXPECT_DOUBLE_EQ(u.v, 0.4);
    EXPECT_NEAR(u.omega, 0.0, 1e-12);
  }
}

TEST(Boltzmann, DeterministicPerSeedAndRejectsNegativeBeta)
{
  const RobotState x{1.0, 1.0, 0.0};
  const GoalPose g{5.0, 3.0, 1.0};
  const auto a = sample_boltzmann_action(x, IntentParams{}, {5.0}, g, ObstacleSet{}, {}, 42);
  const auto b = sample_boltzmann_action(x, IntentParams{}, {5.0}, g, ObstacleSet{}, {}, 42);
  EXPECT_EQ(a, b);
  EXPECT_THROW(sample_boltzmann_action(x, IntentParams{}, {-1.0}, g, ObstacleSet{}, {}, 1), std::invalid_argument);
}
