#pragma once

/**
 * @file
 * @brief CBF-constrained shared-autonomy NMPC.
 *
 * Decision variables per stage k: state x_k, robot input uR_k, predicted
 * human input uH_k, and one CBF slack delta_k. The plant is driven by the
 * blended input lambda uR + (1 - lambda) uH, uH is tied to the state through
 * the human stationarity condition phi(x_k, uH_k) = 0, and every obstacle
 * contributes psi_l(x_k, u_k) >= delta_k.
 *
 * The NLP is solved by SQP with a Gauss-Newton cost Hessian and exact
 * constraint Jacobians. Inside each QP subproblem the linearized stationarity
 * condition is used to eliminate the human input step,
 *
 *   duH_k = L_k dx_k + l_k,   L_k = -phi_u^{-1} phi_x,  l_k = -phi_u^{-1} phi,
 *
 * which leaves a stage-structured QP in (dx, duR, ddelta) solved by
 * qp::solve_ocp_qp.
 */

#include <nlohmann/json.hpp>

#include <chrono>
#include <optional>

#include "human_model.hpp"
#include "qp.hpp"
#include "scenario.hpp"

namespace blendmpc {

/// How x_ref is laid out over the horizon.
enum class ReferencePolicy { constant_goal, straight_line };

struct NmpcConfig
{
  int horizon{100};
  double lambda{0.35};
  Vec3 QR{4.0, 4.0, 4.0};
  Vec3 PR{40.0, 40.0, 40.0};
  Vec2 RR{0.4, 0.2};
  Vec2 RH{0.02, 0.02};
  double slack_weight{1e3};
  InputBox input_bounds{};
  int max_sqp_iters{10};
  double qp_tolerance{1e-8};
  double gamma{0.1};
  DynamicsConfig dynamics{};
  ReferencePolicy reference{ReferencePolicy::constant_goal};

  double feasibility_tolerance{1e-4};  ///< convergence threshold on constraint violation
  double step_tolerance{1e-6};         ///< convergence threshold on the QP step (inf-norm)
  double domain_margin{1e-3};          ///< min distance of any predicted human position to a center

  void validate() const
  {
    if (horizon < 1) throw std::invalid_argument("NmpcConfig.horizon must be >= 1");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("NmpcConfig.lambda must lie in [0, 1]");
    if (!(QR.minCoeff() > 0.0 && PR.minCoeff() > 0.0 && RR.minCoeff() > 0.0 && RH.minCoeff() > 0.0)) {
      throw std::invalid_argument("NmpcConfig weights must be > 0");
    }
    if (!(slack_weight > 0.0)) throw std::invalid_argument("NmpcConfig.slack_weight must be > 0");
    if (!(input_bounds.v_max > 0.0 && input_bounds.omega_max >= 0.0)) {
      throw std::invalid_argument("NmpcConfig.input_bounds must be positive");
    }
    if (max_sqp_iters < 1) throw std::invalid_argument("NmpcConfig.max_sqp_iters must be >= 1");
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("NmpcConfig.gamma must lie in (0, 1)");
    dynamics.validate();
  }
};

struct HorizonSolution
{
  std::vector<RobotState> states;  ///< N+1, yaw canonical, states[0] is the measurement
  std::vector<VelocityCommand> robot_inputs;
  std::vector<VelocityCommand> human_inputs;
  std::vector<double> slacks;

  int sqp_iterations{0};
  int qp_iterations{0};
  double max_constraint_violation{0.0};
  double solve_time{0.0};  ///< seconds
  double cost{0.0};
  double step_norm{0.0};  ///< inf-norm of the last QP step
  bool converged{false};

  /// Multiplier estimates carried between solves for warm starting.
  std::vector<Vec3> costates;
  std::vector<Eigen::VectorXd> cbf_multipliers;

  std::size_t horizon() const { return robot_inputs.size(); }
};

struct ReferenceTrajectory
{
  std::vector<GoalPose> poses;
};

/// Constant goal reference over N+1 knots.
inline ReferenceTrajectory build_reference(const GoalPose & goal, int N)
{
  return {std::vector<GoalPose>(static_cast<std::size_t>(std::max(N, 0)) + 1, goal)};
}

/// Reference under a policy. straight_line interpolates the position from x0
/// to the goal across the horizon and holds the goal yaw.
inline ReferenceTrajectory build_reference(const RobotState & x0, const GoalPose & goal, int N, ReferencePolicy policy)
{
  ReferenceTrajectory ref = build_reference(goal, N);
  if (policy == ReferencePolicy::straight_line && N > 0) {
    for (int k = 0; k <= N; ++k) {
      const double s = static_cast<double>(k) / N;
      ref.poses[static_cast<std::size_t>(k)].gx = x0.px + s * (goal.gx - x0.px);
      ref.poses[static_cast<std::size_t>(k)].gy = x0.py + s * (goal.gy - x0.py);
    }
  }
  return ref;
}

/// Size and sparsity of the transcribed NLP.
struct NlpDescription
{
  int horizon{0};
  int n_obstacles{0};
  int n_variables{0};
  int n_state_variables{0};
  int n_robot_input_variables{0};
  int n_human_input_variables{0};
  int n_slack_variables{0};

  int n_initial_pin{0};     ///< x_0 = measurement
  int n_dynamics{0};        ///< 3 per stage
  int n_stationarity{0};    ///< 2 per stage
  int n_equalities{0};
  int n_cbf{0};             ///< one per stage and obstacle
  int n_input_box{0};       ///< 4 per stage on uR
  int n_inequalities{0};
  int jacobian_nonzeros{0}; ///< structural nonzeros of the constraint Jacobian
};

inline NlpDescription transcribe(int N, int n_obstacles)
{
  NlpDescription d;
  d.horizon = N;
  d.n_obstacles = n_obstacles;
  d.n_state_variables = 3 * (N + 1);
  d.n_robot_input_variables = 2 * N;
  d.n_human_input_variables = 2 * N;
  d.n_slack_variables = N;
  d.n_variables = d.n_state_variables + d.n_robot_input_variables + d.n_human_input_variables + d.n_slack_variables;
  d.n_initial_pin = 3;
  d.n_dynamics = 3 * N;
  d.n_stationarity = 2 * N;
  d.n_equalities = d.n_initial_pin + d.n_dynamics + d.n_stationarity;
  d.n_cbf = N * n_obstacles;
  d.n_input_box = 4 * N;
  d.n_inequalities = d.n_cbf + d.n_input_box;
  // Pin: 3. Dynamics rows: px and py touch (px or py, yaw, next, vR, vH) = 5 each,
  // yaw touches (yaw, next yaw, wR, wH) = 4. Stationarity: 2 rows x (x_k, uH_k) = 10.
  // CBF: (px, py, yaw, vR, vH, delta) = 6. Box: 1.
  d.jacobian_nonzeros = 3 + N * (5 + 5 + 4) + N * 10 + d.n_cbf * 6 + d.n_input_box;
  return d;
}

inline NlpDescription transcribe(
  const RobotState & /*x0*/, const IntentParams & /*theta_hat*/, const Scenario & scenario, const NmpcConfig & cfg)
{
  return transcribe(cfg.horizon, static_cast<int>(scenario.obstacles.size()));
}

namespace detail {

inline Vec3 tracking_error(const RobotState & x, const GoalPose & r)
{
  return {x.px - r.gx, x.py - r.gy, angle_diff(x.yaw, r.gyaw)};
}

}  // namespace detail

/// Objective value of a horizon solution against a reference.
inline double cost(const HorizonSolution & sol, const ReferenceTrajectory & ref, const NmpcConfig & cfg)
{
  const std::size_t N = sol.horizon();
  if (sol.states.size() != N + 1 || ref.poses.size() != N + 1 || sol.human_inputs.size() != N || sol.slacks.size() != N) {
    throw std::invalid_argument("cost: solution and reference sizes do not match");
  }
  const Vec3 eN = detail::tracking_error(sol.states[N], ref.poses[N]);
  double J = eN.dot(cfg.PR.cwiseProduct(eN));
  for (std::size_t k = 0; k < N; ++k) {
    const Vec3 e = detail::tracking_error(sol.states[k], ref.poses[k]);
    const Vec2 uR = sol.robot_inputs[k].vec(), uH = sol.human_inputs[k].vec();
    J += e.dot(cfg.QR.cwiseProduct(e)) + uR.dot(cfg.RR.cwiseProduct(uR)) + uH.dot(cfg.RH.cwiseProduct(uH)) +
         cfg.slack_weight * sol.slacks[k] * sol.slacks[k];
  }
  return J;
}

/// Receding-horizon shift: drop the first knot and repeat the last one. The final slack is zeroed.
inline HorizonSolution warm_shift(const HorizonSolution & prev)
{
  HorizonSolution out = prev;
  auto shift = [](auto & v) {
    if (v.size() > 1) {
      std::rotate(v.begin(), v.begin() + 1, v.end());
      v.back() = v[v.size() - 2];
    }
  };
  shift(out.states);
  shift(out.robot_inputs);
  shift(out.human_inputs);
  shift(out.costates);
  shift(out.cbf_multipliers);
  if (!out.slacks.empty()) {
    std::rotate(out.slacks.begin(), out.slacks.begin() + 1, out.slacks.end());
    out.slacks.back() = 0.0;
  }
  out.converged = false;
  return out;
}

inline nlohmann::json solver_diagnostics_json(const HorizonSolution & sol)
{
  return {{"iters", sol.sqp_iterations}, {"viol", sol.max_constraint_violation}, {"cost", sol.cost},
          {"time", sol.solve_time}, {"converged", sol.converged}};
}

namespace detail {

// Iterate of the SQP, yaw carried continuously.
struct NlpIterate
{
  std::vector<Vec3> x;   // N+1
  std::vector<Vec2> uR;  // N
  std::vector<Vec2> uH;  // N
  std::vector<double> delta;

  // Multiplier estimates from the last QP; empty means Gauss-Newton only.
  std::vector<Vec3> costate;            // N, multiplier of the stage-k dynamics
  std::vector<Eigen::VectorXd> cbf_dual; // N
};

// Hessian of lambda' f - z' psi over (px, py, yaw, v) at one stage, where f is
// the unicycle step and psi the CBF residuals.
inline Eigen::Matrix4d stage_curvature(
  const RobotState & x, double v, const Vec3 & lam, const Eigen::VectorXd & z, const ObstacleSet & obs, double gamma,
  double ts, double eps = 1e-12)
{
  const double c = std::cos(x.yaw), s = std::sin(x.yaw);
  Eigen::Matrix2d Hpx, Hpy;  // d2 p_next / d(yaw, v)2
  Hpx << -ts * v * c, -ts * s, -ts * s, 0.0;
  Hpy << -ts * v * s, ts * c, ts * c, 0.0;
  Eigen::Matrix4d W = Eigen::Matrix4d::Zero();
  W.bottomRightCorner<2, 2>() = lam.x() * Hpx + lam.y() * Hpy;
  if (z.size() == 0) return W;

  Eigen::Matrix<double, 2, 4> J1;
  J1 << 1.0, 0.0, -ts * v * s, ts * c, 0.0, 1.0, ts * v * c, ts * s;
  const Vec2 p0 = x.position();
  const Vec2 p1{x.px + ts * v * c, x.py + ts * v * s};
  for (std::size_t l = 0; l < obs.size(); ++l) {
    const double zl = z[static_cast<Eigen::Index>(l)];
    if (zl == 0.0) continue;
    const Vec2 r1 = p1 - obs.centers[l], r0 = p0 - obs.centers[l];
    const double n1 = std::sqrt(r1.squaredNorm() + eps), n0 = std::sqrt(r0.squaredNorm() + eps);
    const Vec2 g1 = r1 / n1, g0 = r0 / n0;
    const Mat2 Hn1 = (Mat2::Identity() - g1 * g1.transpose()) / n1;
    const Mat2 Hn0 = (Mat2::Identity() - g0 * g0.transpose()) / n0;
    Eigen::Matrix4d Hpsi = J1.transpose() * Hn1 * J1;
    Hpsi.bottomRightCorner<2, 2>() += g1.x() * Hpx + g1.y() * Hpy;
    Hpsi.topLeftCorner<2, 2>() -= (1.0 - gamma) * Hn0;
    W -= zl * Hpsi;
  }
  return W;
}

// Nonlinear constraint values at an iterate.
struct NlpResiduals
{
  double cost{0.0};
  double l1_violation{0.0};
  double max_violation{0.0};
};

class SqpProblem
{
public:
  SqpProblem(const RobotState & x0, const IntentParams & theta, const Scenario & sc, const NmpcConfig & cfg)
      : x0_(x0), theta_(theta), goal_(sc.goal), obs_(sc.effective_obstacles()), cfg_(cfg),
        N_(static_cast<std::size_t>(cfg.horizon)), ref_(build_reference(x0, sc.goal, cfg.horizon, cfg.reference))
  {}

  std::size_t N() const { return N_; }
  const ObstacleSet & obstacles() const { return obs_; }

  Vec2 blended(const NlpIterate & v, std::size_t k) const
  {
    return cfg_.lambda * v.uR[k] + (1.0 - cfg_.lambda) * v.uH[k];
  }

  NlpIterate cold_start() const
  {
    NlpIterate v;
    v.x.assign(N_ + 1, x0_.vec());
    v.uR.assign(N_, Vec2::Zero());
    v.uH.assign(N_, Vec2::Zero());
    v.delta.assign(N_, 0.0);
    VelocityCommand guess{};
    for (std::size_t k = 0; k < N_; ++k) {
      const RobotState xk = RobotState::from(v.x[k]);
      try {
        guess = solve_rational_action(xk, theta_, goal_, obs_, cfg_.dynamics, guess);
      } catch (const std::exception &) {
        guess = VelocityCommand{};
      }
      v.uH[k] = guess.vec();
      const VelocityCommand u = VelocityCommand::from(blended(v, k));
      v.x[k + 1] = step_raw(xk, u, cfg_.dynamics.ts);
      if (!obs_.empty()) {
        const CbfEval cb = evaluate_cbf(xk, u, obs_, cfg_.gamma, cfg_.dynamics.ts);
        v.delta[k] = std::min(0.0, cb.value.minCoeff());
      }
    }
    return v;
  }

  NlpIterate from_warm(const HorizonSolution & w) const
  {
    NlpIterate v;
    v.x.resize(N_ + 1);
    v.x[0] = x0_.vec();
    for (std::size_t k = 1; k <= N_; ++k) {
      Vec3 s = w.states[k].vec();
      s.z() = v.x[k - 1].z() + angle_diff(s.z(), v.x[k - 1].z());
      v.x[k] = s;
    }
    v.uR.resize(N_);
    v.uH.resize(N_);
    v.delta.resize(N_);
    for (std::size_t k = 0; k < N_; ++k) {
      v.uR[k] = cfg_.input_bounds.clamp(w.robot_inputs[k]).vec();
      v.uH[k] = w.human_inputs[k].vec();
      v.delta[k] = w.slacks[k];
    }
    if (w.costates.size() == N_ && w.cbf_multipliers.size() == N_) {
      v.costate = w.costates;
      v.cbf_dual = w.cbf_multipliers;
      for (auto & z : v.cbf_dual) {
        if (z.size() != static_cast<Eigen::Index>(obs_.size())) z = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(obs_.size()));
      }
    }
    return v;
  }

  bool in_domain(const NlpIterate & v) const
  {
    const double m2 = cfg_.domain_margin * cfg_.domain_margin;
    for (std::size_t k = 0; k < N_; ++k) {
      const Vec2 p = predicted_position(RobotState::from(v.x[k]), VelocityCommand::from(v.uH[k]), cfg_.dynamics.ts);
      for (const auto & o : obs_.centers) {
        if (!((p - o).squaredNorm() >= m2)) return false;
      }
    }
    return true;
  }

  bool finite(const NlpIterate & v) const
  {
    for (std::size_t k = 0; k < N_; ++k) {
      if (!v.x[k + 1].allFinite() || !v.uR[k].allFinite() || !v.uH[k].allFinite() || !std::isfinite(v.delta[k])) {
        return false;
      }
    }
    return true;
  }

  NlpResiduals evaluate(const NlpIterate & v) const
  {
    NlpResiduals r;
    const double ts = cfg_.dynamics.ts;
    const Vec3 eN = terminal_error(v);
    r.cost = eN.dot(cfg_.PR.cwiseProduct(eN));
    for (std::size_t k = 0; k < N_; ++k) {
      const RobotState xk = RobotState::from(v.x[k]);
      const Vec3 e = stage_error(v, k);
      r.cost += e.dot(cfg_.QR.cwiseProduct(e)) + v.uR[k].dot(cfg_.RR.cwiseProduct(v.uR[k])) +
                v.uH[k].dot(cfg_.RH.cwiseProduct(v.uH[k])) + cfg_.slack_weight * v.delta[k] * v.delta[k];

      const VelocityCommand u = VelocityCommand::from(blended(v, k));
      const Vec3 defect = step_raw(xk, u, ts) - v.x[k + 1];
      accumulate(r, defect.cwiseAbs());
      const Vec2 phi = evaluate_stationarity(xk, VelocityCommand::from(v.uH[k]), theta_, goal_, obs_, cfg_.dynamics, 1e-12).phi;
      accumulate(r, phi.cwiseAbs());
      if (!obs_.empty()) {
        const CbfEval cb = evaluate_cbf(xk, u, obs_, cfg_.gamma, ts);
        const Eigen::VectorXd gap = (v.delta[k] - cb.value.array()).max(0.0).matrix();
        accumulate(r, gap);
      }
      const Vec2 over{std::max(0.0, std::abs(v.uR[k].x()) - cfg_.input_bounds.v_max),
                      std::max(0.0, std::abs(v.uR[k].y()) - cfg_.input_bounds.omega_max)};
      accumulate(r, over);
    }
    return r;
  }

  Vec3 stage_error(const NlpIterate & v, std::size_t k) const
  {
    return tracking_error(RobotState::from(v.x[k]), ref_.poses[k]);
  }
  Vec3 terminal_error(const NlpIterate & v) const { return tracking_error(RobotState::from(v.x[N_]), ref_.poses[N_]); }

  HorizonSolution to_solution(const NlpIterate & v) const
  {
    HorizonSolution s;
    s.states.resize(N_ + 1);
    s.states[0] = x0_;
    for (std::size_t k = 1; k <= N_; ++k) s.states[k] = RobotState::from(v.x[k]).canonical();
    for (std::size_t k = 0; k < N_; ++k) {
      s.robot_inputs.push_back(VelocityCommand::from(v.uR[k]));
      s.human_inputs.push_back(VelocityCommand::from(v.uH[k]));
      s.slacks.push_back(v.delta[k]);
    }
    s.costates = v.costate;
    s.cbf_multipliers = v.cbf_dual;
    return s;
  }

  // Builds the reduced QP at v. Also returns per-stage elimination data.
  struct Linearization
  {
    qp::OcpQp<3, 3> qp;
    std::vector<Eigen::Matrix<double, 2, 3>> L;
    std::vector<Vec2> l;
    std::vector<Mat2> phi_u;
    std::vector<Mat32> Fu;
    std::vector<Eigen::Matrix<double, Eigen::Dynamic, 2>> psi_u;
  };

  Linearization linearize(const NlpIterate & v) const
  {
    const double ts = cfg_.dynamics.ts;
    const double lam = cfg_.lambda;
    const auto nO = static_cast<Eigen::Index>(obs_.size());
    Linearization lin;
    auto & q = lin.qp;
    q.stages.resize(N_);
    lin.L.resize(N_);
    lin.l.resize(N_);
    lin.phi_u.resize(N_);
    lin.Fu.resize(N_);
    lin.psi_u.resize(N_);
    q.x0.setZero();

    const Vec3 QR2 = 2.0 * cfg_.QR;
    for (std::size_t k = 0; k < N_; ++k) {
      const RobotState xk = RobotState::from(v.x[k]);
      const VelocityCommand uHk = VelocityCommand::from(v.uH[k]);
      const VelocityCommand u = VelocityCommand::from(blended(v, k));

      const StationarityEval st = evaluate_stationarity(xk, uHk, theta_, goal_, obs_, cfg_.dynamics, 1e-12);
      Eigen::JacobiSVD<Mat2> svd(st.d_u);
      const auto sv = svd.singularValues();
      if (!st.d_u.allFinite() || !(sv[1] > 1e-12 * sv[0])) {
        throw SolverFailure("stationarity Jacobian is singular at stage " + std::to_string(k));
      }
      const Mat2 Pinv = st.d_u.inverse();
      const Eigen::Matrix<double, 2, 3> L = -Pinv * st.d_x;
      const Vec2 l = -Pinv * st.phi;
      lin.L[k] = L;
      lin.l[k] = l;
      lin.phi_u[k] = st.d_u;

      const Mat3 Fx = step_jacobian_state(xk, u, ts);
      const Mat32 Fu = input_matrix(xk, ts);
      lin.Fu[k] = Fu;
      auto & s = q.stages[k];
      s.A = Fx + (1.0 - lam) * Fu * L;
      s.B.setZero();
      s.B.leftCols<2>() = lam * Fu;
      s.b = (1.0 - lam) * Fu * l + (step_raw(xk, u, ts) - v.x[k + 1]);

      const Vec2 RH2 = 2.0 * cfg_.RH;
      s.Q = QR2.asDiagonal();
      s.Q.noalias() += L.transpose() * RH2.asDiagonal() * L;
      s.q = QR2.cwiseProduct(stage_error(v, k)) + L.transpose() * RH2.cwiseProduct(v.uH[k] + l);
      s.R.setZero();
      s.R(0, 0) = 2.0 * cfg_.RR.x();
      s.R(1, 1) = 2.0 * cfg_.RR.y();
      s.R(2, 2) = 2.0 * cfg_.slack_weight;
      s.S.setZero();
      s.r << 2.0 * cfg_.RR.cwiseProduct(v.uR[k]), 2.0 * cfg_.slack_weight * v.delta[k];

      if (nO > 0) {
        const CbfEval cb = evaluate_cbf(xk, u, obs_, cfg_.gamma, ts);
        lin.psi_u[k] = cb.d_u;
        s.D = cb.d_x + (1.0 - lam) * cb.d_u * L;
        s.E.resize(nO, 3);
        s.E.leftCols<2>() = lam * cb.d_u;
        s.E.col(2).setConstant(-1.0);
        s.d = -(cb.value + (1.0 - lam) * cb.d_u * l - Eigen::VectorXd::Constant(nO, v.delta[k]));
      } else {
        s.D.resize(0, 3);
        s.E.resize(0, 3);
        s.d.resize(0);
      }
      if (!v.costate.empty()) add_curvature(v, k, L, l, s);
      const Vec2 lo{-cfg_.input_bounds.v_max, -cfg_.input_bounds.omega_max};
      const Vec2 hi{cfg_.input_bounds.v_max, cfg_.input_bounds.omega_max};
      s.u_lo << lo - v.uR[k], -qp::detail::kInf;
      s.u_hi << hi - v.uR[k], qp::detail::kInf;
    }
    q.Q_N = (2.0 * cfg_.PR).asDiagonal();
    q.q_N = 2.0 * cfg_.PR.cwiseProduct(terminal_error(v));
    return lin;
  }

  // Adds multiplier-weighted constraint curvature, mapped through the uH
  // elimination, and projects the (x, uR) block to be positive definite.
  void add_curvature(
    const NlpIterate & v, std::size_t k, const Eigen::Matrix<double, 2, 3> & L, const Vec2 & l,
    qp::OcpQpStage<3, 3> & s) const
  {
    const double lam = cfg_.lambda;
    const RobotState xk = RobotState::from(v.x[k]);
    const double vb = blended(v, k).x();
    const Eigen::Matrix4d W = stage_curvature(xk, vb, v.costate[k], v.cbf_dual[k], obs_, cfg_.gamma, cfg_.dynamics.ts);

    // (px, py, yaw, v) as a function of the reduced step (dx, duR).
    Eigen::Matrix<double, 4, 5> T = Eigen::Matrix<double, 4, 5>::Zero();
    T.topLeftCorner<3, 3>().setIdentity();
    T.block<1, 3>(3, 0) = (1.0 - lam) * L.row(0);
    T(3, 3) = lam;
    Eigen::Vector4d c = Eigen::Vector4d::Zero();
    c[3] = (1.0 - lam) * l.x();

    Eigen::Matrix<double, 5, 5> M;
    M.topLeftCorner<3, 3>() = s.Q;
    M.bottomLeftCorner<2, 3>() = s.S.topRows<2>();
    M.topRightCorner<3, 2>() = s.S.topRows<2>().transpose();
    M.bottomRightCorner<2, 2>() = s.R.topLeftCorner<2, 2>();
    M += T.transpose() * W * T;
    const Eigen::Matrix<double, 5, 1> g = T.transpose() * W * c;

    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 5, 5>> es(0.5 * (M + M.transpose()));
    const Eigen::Matrix<double, 5, 1> ev = es.eigenvalues().cwiseMax(1e-6);
    M = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();

    s.Q = M.topLeftCorner<3, 3>();
    s.S.topRows<2>() = M.bottomLeftCorner<2, 3>();
    s.R.topLeftCorner<2, 2>() = M.bottomRightCorner<2, 2>();
    s.q += g.head<3>();
    s.r.head<2>() += g.tail<2>();
  }

  // Exact cost gradient along a full step, and the model curvature term 1/2 p'Hp.
  std::pair<double, double> cost_slope(const NlpIterate & v, const NlpIterate & p) const
  {
    double g = 0.0, h = 0.0;
    for (std::size_t k = 0; k < N_; ++k) {
      const Vec3 e = stage_error(v, k);
      g += 2.0 * e.dot(cfg_.QR.cwiseProduct(p.x[k])) + 2.0 * v.uR[k].dot(cfg_.RR.cwiseProduct(p.uR[k])) +
           2.0 * v.uH[k].dot(cfg_.RH.cwiseProduct(p.uH[k])) + 2.0 * cfg_.slack_weight * v.delta[k] * p.delta[k];
      h += p.x[k].dot(cfg_.QR.cwiseProduct(p.x[k])) + p.uR[k].dot(cfg_.RR.cwiseProduct(p.uR[k])) +
           p.uH[k].dot(cfg_.RH.cwiseProduct(p.uH[k])) + cfg_.slack_weight * p.delta[k] * p.delta[k];
    }
    const Vec3 eN = terminal_error(v);
    g += 2.0 * eN.dot(cfg_.PR.cwiseProduct(p.x[N_]));
    h += p.x[N_].dot(cfg_.PR.cwiseProduct(p.x[N_]));
    return {g, h};
  }

private:
  template<typename V>
  static void accumulate(NlpResiduals & r, const V & nonneg)
  {
    if (nonneg.size() == 0) return;
    r.l1_violation += nonneg.sum();
    r.max_violation = std::max(r.max_violation, nonneg.maxCoeff());
  }

  RobotState x0_;
  IntentParams theta_;
  GoalPose goal_;
  ObstacleSet obs_;
  NmpcConfig cfg_;
  std::size_t N_;
  ReferenceTrajectory ref_;
};

inline NlpIterate axpy(const NlpIterate & v, double a, const NlpIterate & p)
{
  NlpIterate out = v;
  for (std::size_t k = 0; k < v.x.size(); ++k) out.x[k] += a * p.x[k];
  for (std::size_t k = 0; k < v.uR.size(); ++k) {
    out.uR[k] += a * p.uR[k];
    out.uH[k] += a * p.uH[k];
    out.delta[k] += a * p.delta[k];
  }
  return out;
}

}  // namespace detail

/**
 * @brief Solves the NMPC problem from measured state x0.
 *
 * Runs at most cfg.max_sqp_iters SQP iterations starting from warm (or a
 * rollout of the rational human action when warm is empty or mis-sized).
 *
 * @throws SolverFailure when a QP subproblem breaks down or the stationarity
 *         Jacobian is singular.
 */
inline HorizonSolution solve(
  const RobotState & x0, const IntentParams & theta_hat, const Scenario & scenario, const NmpcConfig & cfg,
  const std::optional<HorizonSolution> & warm = std::nullopt)
{
  cfg.validate();
  theta_hat.validate();
  if (!x0.finite()) throw std::invalid_argument("solve: x0 must be finite");
  const auto t_start = std::chrono::steady_clock::now();

  detail::SqpProblem prob(x0.canonical(), theta_hat, scenario, cfg);
  const std::size_t N = prob.N();
  const bool warm_ok = warm && warm->horizon() == N && warm->states.size() == N + 1 && warm->slacks.size() == N &&
                       warm->human_inputs.size() == N;
  detail::NlpIterate v = warm_ok ? prob.from_warm(*warm) : prob.cold_start();
  if (!prob.finite(v) || !prob.in_domain(v)) v = prob.cold_start();

  qp::Settings qps;
  qps.tolerance = cfg.qp_tolerance;

  detail::NlpResiduals res = prob.evaluate(v);
  double rho = 1.0;
  int iters = 0, qp_iters = 0;
  double step_norm = std::numeric_limits<double>::infinity();
  bool converged = false;

  for (int it = 0; it < cfg.max_sqp_iters; ++it) {
    auto lin = prob.linearize(v);
    const auto qsol = qp::solve_ocp_qp(lin.qp, qps);
    qp_iters += qsol.iterations;
    if (qsol.status == qp::Status::NumericalFailure || qsol.status == qp::Status::Unbounded ||
        qsol.status == qp::Status::Infeasible) {
      throw SolverFailure(std::string("QP subproblem failed: ") + qp::to_string(qsol.status));
    }
    ++iters;
    v.costate.resize(N);
    v.cbf_dual.resize(N);
    for (std::size_t k = 0; k < N; ++k) {
      v.costate[k] = qsol.lambda[k + 1];
      v.cbf_dual[k] = qsol.z_rows[k];
    }

    // Full step including the eliminated human input.
    detail::NlpIterate p;
    p.x.assign(N + 1, Vec3::Zero());
    p.uR.resize(N);
    p.uH.resize(N);
    p.delta.resize(N);
    step_norm = 0.0;
    double mult = 0.0;
    const double lam = cfg.lambda;
    for (std::size_t k = 0; k < N; ++k) {
      p.x[k + 1] = qsol.x[k + 1];
      p.uR[k] = qsol.u[k].head<2>();
      p.delta[k] = qsol.u[k][2];
      p.uH[k] = lin.L[k] * p.x[k] + lin.l[k];
      step_norm = std::max({step_norm, p.x[k + 1].lpNorm<Eigen::Infinity>(), p.uR[k].lpNorm<Eigen::Infinity>(),
                            p.uH[k].lpNorm<Eigen::Infinity>(), std::abs(p.delta[k])});

      // Multiplier of the stationarity rows, recovered from the uH optimality condition.
      Vec2 rhs = 2.0 * cfg.RH.cwiseProduct(v.uH[k] + p.uH[k]) + (1.0 - lam) * lin.Fu[k].transpose() * qsol.lambda[k + 1];
      if (qsol.z_rows[k].size()) rhs -= (1.0 - lam) * lin.psi_u[k].transpose() * qsol.z_rows[k];
      const Vec2 nu = -lin.phi_u[k].transpose().partialPivLu().solve(rhs);
      mult = std::max({mult, qsol.lambda[k + 1].lpNorm<Eigen::Infinity>(), nu.lpNorm<Eigen::Infinity>()});
      if (qsol.z_rows[k].size()) mult = std::max(mult, qsol.z_rows[k].lpNorm<Eigen::Infinity>());
    }

    if (step_norm <= cfg.step_tolerance) {
      v = detail::axpy(v, 1.0, p);
      res = prob.evaluate(v);
      converged = res.max_violation <= cfg.feasibility_tolerance;
      if (converged) break;
      continue;
    }

    // Penalty update keeps the step a descent direction of the l1 merit.
    const auto [slope, curv] = prob.cost_slope(v, p);
    rho = std::max(rho, 1.1 * mult);
    if (res.l1_violation > 0.0) rho = std::max(rho, (slope + std::max(curv, 0.0)) / (0.5 * res.l1_violation));
    const double merit0 = res.cost + rho * res.l1_violation;
    const double dmerit = slope - rho * res.l1_violation;

    double alpha = 1.0;
    bool accepted = false;
    for (int h = 0; h < 40; ++h, alpha *= 0.5) {
      const detail::NlpIterate trial = detail::axpy(v, alpha, p);
      if (!prob.finite(trial) || !prob.in_domain(trial)) continue;
      const detail::NlpResiduals tr = prob.evaluate(trial);
      const double merit = tr.cost + rho * tr.l1_violation;
      if (std::isfinite(merit) && merit <= merit0 + 1e-4 * alpha * std::min(dmerit, 0.0)) {
        v = trial;
        res = tr;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }

  HorizonSolution out = prob.to_solution(v);
  out.sqp_iterations = iters;
  out.qp_iterations = qp_iters;
  out.max_constraint_violation = res.max_violation;
  out.cost = res.cost;
  out.step_norm = step_norm;
  out.converged = converged || (step_norm <= cfg.step_tolerance && res.max_violation <= cfg.feasibility_tolerance);
  out.solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return out;
}

/// Stateful wrapper that keeps the previous solution for warm starting.
class NmpcSolver
{
public:
  explicit NmpcSolver(NmpcConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const NmpcConfig & config() const { return cfg_; }
  NmpcConfig & config() { return cfg_; }
  const std::optional<HorizonSolution> & previous() const { return prev_; }
  void reset()
  {
    prev_.reset();
    older_.reset();
  }

  /// Forgets the most recent solve, e.g. after a deadline overrun.
  void discard_last() { prev_ = older_; }

  /// Solves with the shifted previous solution as the initial guess and stores the result.
  /// `lambda` overrides the configured arbitration weight for this solve only.
  HorizonSolution solve(
    const RobotState & x0, const IntentParams & theta_hat, const Scenario & scenario, std::optional<double> lambda = std::nullopt)
  {
    std::optional<HorizonSolution> warm;
    if (prev_) warm = warm_shift(*prev_);
    NmpcConfig cfg = cfg_;
    if (lambda) cfg.lambda = *lambda;
    HorizonSolution sol = blendmpc::solve(x0, theta_hat, scenario, cfg, warm);
    older_ = std::move(prev_);
    prev_ = sol;
    return sol;
  }

  /// Receding-horizon fallback: previous solution shifted by one step, re-pinned at x0.
  std::optional<HorizonSolution> fallback(const RobotState & x0)
  {
    if (!prev_) return std::nullopt;
    HorizonSolution sol = warm_shift(*prev_);
    sol.states[0] = x0;
    sol.sqp_iterations = 0;
    sol.qp_iterations = 0;
    sol.solve_time = 0.0;
    prev_ = sol;
    return sol;
  }

private:
  NmpcConfig cfg_;
  std::optional<HorizonSolution> prev_;
  std::optional<HorizonSolution> older_;
};

}  // namespace blendmpc
