#pragma once

/**
 * @file
 * @brief Convex QP solvers.
 *
 * Two primal-dual interior-point solvers sharing the same Mehrotra
 * predictor-corrector scheme:
 *
 *  - solve_dense_qp: general dense QP
 *      min 1/2 x'Hx + g'x  s.t.  A x = b,  l <= C x <= u
 *    Newton systems are solved on the reduced KKT matrix with LU.
 *
 *  - solve_ocp_qp: stage-structured QP from optimal control
 *      min sum_k 1/2 [x;u]'[Q S';S R][x;u] + q'x + r'u + 1/2 x_N'Q_N x_N + q_N'x_N
 *      s.t. x_{k+1} = A_k x_k + B_k u_k + b_k,  x_0 fixed,
 *           D_k x_k + E_k u_k >= d_k,  u_lo <= u_k <= u_hi
 *    Newton systems are solved by a Riccati recursion, O(N) per iteration.
 *
 * Rows with equal lower and upper bounds are treated as equalities.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace blendmpc::qp {

struct Settings
{
  double tolerance{1e-8};
  int max_iterations{100};
  double step_fraction{0.995};
};

enum class Status { Solved, MaxIterations, NumericalFailure, Unbounded, Infeasible };

inline const char * to_string(Status s)
{
  switch (s) {
    case Status::Solved: return "solved";
    case Status::MaxIterations: return "max_iterations";
    case Status::NumericalFailure: return "numerical_failure";
    case Status::Unbounded: return "unbounded";
    case Status::Infeasible: return "infeasible";
  }
  return "unknown";
}

namespace detail {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline bool is_fixed(double lo, double hi) { return std::isfinite(lo) && std::isfinite(hi) && hi - lo <= 1e-14 * std::max(1.0, std::abs(lo)); }

// Largest alpha in (0, 1] keeping v + alpha dv >= (1 - fraction) v.
inline double max_step(const Eigen::VectorXd & v, const Eigen::VectorXd & dv, double fraction)
{
  double a = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (dv[i] < 0.0) a = std::min(a, -fraction * v[i] / dv[i]);
  }
  return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense QP
// ---------------------------------------------------------------------------

struct DenseQp
{
  Eigen::MatrixXd H;
  Eigen::VectorXd g;
  Eigen::MatrixXd A;  ///< equality rows (may have 0 rows)
  Eigen::VectorXd b;
  Eigen::MatrixXd C;  ///< two-sided inequality rows (may have 0 rows)
  Eigen::VectorXd l;  ///< -inf allowed
  Eigen::VectorXd u;  ///< +inf allowed
};

struct DenseQpResult
{
  Status status{Status::NumericalFailure};
  int iterations{0};
  Eigen::VectorXd x;
  Eigen::VectorXd y;  ///< multipliers of A x = b
  Eigen::VectorXd w;  ///< signed multipliers of C rows (lower-active positive)
  double objective{0.0};
};

inline DenseQpResult solve_dense_qp(const DenseQp & prob, const Settings & set = {})
{
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const Eigen::Index n = prob.H.rows();
  const Eigen::Index me0 = prob.A.rows();
  const Eigen::Index mc = prob.C.rows();
  if (mc > 0 && (prob.l.array() > prob.u.array()).any()) {
    DenseQpResult r;
    r.status = Status::Infeasible;
    return r;
  }

  // Split C rows into equalities and one-sided rows G x >= d.
  std::vector<Eigen::Index> eq_rows, lo_rows, hi_rows;
  for (Eigen::Index i = 0; i < mc; ++i) {
    if (detail::is_fixed(prob.l[i], prob.u[i])) {
      eq_rows.push_back(i);
      continue;
    }
    if (std::isfinite(prob.l[i])) lo_rows.push_back(i);
    if (std::isfinite(prob.u[i])) hi_rows.push_back(i);
  }
  const Eigen::Index me = me0 + static_cast<Eigen::Index>(eq_rows.size());
  const Eigen::Index mi = static_cast<Eigen::Index>(lo_rows.size() + hi_rows.size());

  MatrixXd Aeq(me, n);
  VectorXd beq(me);
  if (me0 > 0) {
    Aeq.topRows(me0) = prob.A;
    beq.head(me0) = prob.b;
  }
  for (std::size_t k = 0; k < eq_rows.size(); ++k) {
    Aeq.row(me0 + static_cast<Eigen::Index>(k)) = prob.C.row(eq_rows[k]);
    beq[me0 + static_cast<Eigen::Index>(k)] = prob.l[eq_rows[k]];
  }
  MatrixXd G(mi, n);
  VectorXd d(mi);
  {
    Eigen::Index r = 0;
    for (auto i : lo_rows) {
      G.row(r) = prob.C.row(i);
      d[r++] = prob.l[i];
    }
    for (auto i : hi_rows) {
      G.row(r) = -prob.C.row(i);
      d[r++] = -prob.u[i];
    }
  }

  VectorXd x = VectorXd::Zero(n), y = VectorXd::Zero(me);
  VectorXd s = (G * x - d).cwiseMax(1.0), z = VectorXd::Ones(mi);

  const double gscale = 1.0 + (prob.g.size() ? prob.g.lpNorm<Eigen::Infinity>() : 0.0);
  const double bscale = 1.0 + (me ? beq.lpNorm<Eigen::Infinity>() : 0.0);
  const double dscale = 1.0 + (mi ? d.lpNorm<Eigen::Infinity>() : 0.0);

  DenseQpResult res;
  const Eigen::Index nk = n + me;
  MatrixXd K(nk, nk);
  for (int it = 0; it <= set.max_iterations; ++it) {
    const VectorXd rd = prob.H * x + prob.g - Aeq.transpose() * y - G.transpose() * z;
    const VectorXd re = Aeq * x - beq;
    const VectorXd ri = G * x - s - d;
    const double mu = mi ? s.dot(z) / static_cast<double>(mi) : 0.0;
    res.iterations = it;

    if (!x.allFinite() || !s.allFinite() || !z.allFinite()) {
      res.status = Status::NumericalFailure;
      break;
    }
    if (x.lpNorm<Eigen::Infinity>() > 1e15) {
      res.status = Status::Unbounded;
      break;
    }
    const bool done = (rd.size() == 0 || rd.lpNorm<Eigen::Infinity>() <= set.tolerance * gscale) &&
                      (re.size() == 0 || re.lpNorm<Eigen::Infinity>() <= set.tolerance * bscale) &&
                      (ri.size() == 0 || ri.lpNorm<Eigen::Infinity>() <= set.tolerance * dscale) &&
                      mu <= set.tolerance;
    if (done) {
      res.status = Status::Solved;
      break;
    }
    if (it == set.max_iterations) {
      res.status = Status::MaxIterations;
      break;
    }

    const VectorXd W = z.cwiseQuotient(s);
    K.setZero();
    K.topLeftCorner(n, n) = prob.H + G.transpose() * W.asDiagonal() * G;
    K.topRightCorner(n, me) = Aeq.transpose();
    K.bottomLeftCorner(me, n) = Aeq;
    Eigen::PartialPivLU<MatrixXd> lu(K);

    auto newton = [&](const VectorXd & rc, VectorXd & dx, VectorXd & dy, VectorXd & ds, VectorXd & dz) {
      VectorXd rhs(nk);
      rhs.head(n) = -rd - G.transpose() * (W.cwiseProduct(ri) + rc.cwiseQuotient(s));
      rhs.tail(me) = -re;
      const VectorXd sol = lu.solve(rhs);
      dx = sol.head(n);
      dy = -sol.tail(me);
      ds = G * dx + ri;
      dz = -(rc + z.cwiseProduct(ds)).cwiseQuotient(s);
    };

    VectorXd dx, dy, ds, dz;
    double alpha = 1.0;
    if (mi > 0) {
      newton(s.cwiseProduct(z), dx, dy, ds, dz);
      const double a_aff = std::min(detail::max_step(s, ds, 1.0), detail::max_step(z, dz, 1.0));
      const double mu_aff = (s + a_aff * ds).dot(z + a_aff * dz) / static_cast<double>(mi);
      const double sigma = std::pow(mu_aff / mu, 3);
      const VectorXd rc = s.cwiseProduct(z) + ds.cwiseProduct(dz) - VectorXd::Constant(mi, sigma * mu);
      newton(rc, dx, dy, ds, dz);
      alpha = std::min(detail::max_step(s, ds, set.step_fraction), detail::max_step(z, dz, set.step_fraction));
    } else {
      newton(VectorXd::Zero(0), dx, dy, ds, dz);
    }
    x += alpha * dx;
    y += alpha * dy;
    s += alpha * ds;
    z += alpha * dz;
  }

  res.x = x;
  res.y = y.head(me0);
  res.w = VectorXd::Zero(mc);
  {
    Eigen::Index r = 0;
    for (auto i : lo_rows) res.w[i] += z[r++];
    for (auto i : hi_rows) res.w[i] -= z[r++];
    for (std::size_t k = 0; k < eq_rows.size(); ++k) res.w[eq_rows[k]] = y[me0 + static_cast<Eigen::Index>(k)];
  }
  res.objective = 0.5 * x.dot(prob.H * x) + prob.g.dot(x);
  return res;
}

// ---------------------------------------------------------------------------
// Stage-structured QP
// ---------------------------------------------------------------------------

template<int Nx, int Nu>
struct OcpQpStage
{
  Eigen::Matrix<double, Nx, Nx> A = Eigen::Matrix<double, Nx, Nx>::Identity();
  Eigen::Matrix<double, Nx, Nu> B = Eigen::Matrix<double, Nx, Nu>::Zero();
  Eigen::Matrix<double, Nx, 1> b = Eigen::Matrix<double, Nx, 1>::Zero();

  Eigen::Matrix<double, Nx, Nx> Q = Eigen::Matrix<double, Nx, Nx>::Zero();
  Eigen::Matrix<double, Nu, Nu> R = Eigen::Matrix<double, Nu, Nu>::Identity();
  Eigen::Matrix<double, Nu, Nx> S = Eigen::Matrix<double, Nu, Nx>::Zero();
  Eigen::Matrix<double, Nx, 1> q = Eigen::Matrix<double, Nx, 1>::Zero();
  Eigen::Matrix<double, Nu, 1> r = Eigen::Matrix<double, Nu, 1>::Zero();

  /// General rows D x + E u >= d.
  Eigen::Matrix<double, Eigen::Dynamic, Nx> D;
  Eigen::Matrix<double, Eigen::Dynamic, Nu> E;
  Eigen::VectorXd d;

  Eigen::Matrix<double, Nu, 1> u_lo = Eigen::Matrix<double, Nu, 1>::Constant(-detail::kInf);
  Eigen::Matrix<double, Nu, 1> u_hi = Eigen::Matrix<double, Nu, 1>::Constant(detail::kInf);
};

template<int Nx, int Nu>
struct OcpQp
{
  std::vector<OcpQpStage<Nx, Nu>> stages;  ///< k = 0..N-1
  Eigen::Matrix<double, Nx, Nx> Q_N = Eigen::Matrix<double, Nx, Nx>::Zero();
  Eigen::Matrix<double, Nx, 1> q_N = Eigen::Matrix<double, Nx, 1>::Zero();
  Eigen::Matrix<double, Nx, 1> x0 = Eigen::Matrix<double, Nx, 1>::Zero();
};

template<int Nx, int Nu>
struct OcpQpSolution
{
  using VecX = Eigen::Matrix<double, Nx, 1>;
  using VecU = Eigen::Matrix<double, Nu, 1>;

  Status status{Status::NumericalFailure};
  int iterations{0};
  std::vector<VecX> x;         ///< N+1
  std::vector<VecU> u;         ///< N
  std::vector<VecX> lambda;    ///< N+1 costates, lambda[0] unused
  std::vector<Eigen::VectorXd> z_rows;  ///< multipliers of D x + E u >= d
  std::vector<VecU> z_bounds;  ///< signed bound multipliers (lower-active positive)
  double objective{0.0};
};

namespace detail {

template<int Nx, int Nu>
struct StageRows
{
  Eigen::Matrix<double, Eigen::Dynamic, Nx> Gx;
  Eigen::Matrix<double, Eigen::Dynamic, Nu> Gu;
  Eigen::VectorXd d;
  int n_general{0};
  std::vector<std::pair<int, double>> bound_rows;  // (component, sign) for rows after the general ones
  Eigen::Matrix<double, Nu, 1> fixed_mask;         // 1 where u component is pinned
  Eigen::Matrix<double, Nu, 1> fixed_value;
};

template<int Nx, int Nu>
StageRows<Nx, Nu> build_rows(const OcpQpStage<Nx, Nu> & st)
{
  StageRows<Nx, Nu> rows;
  rows.fixed_mask.setZero();
  rows.fixed_value.setZero();
  rows.n_general = static_cast<int>(st.d.size());
  for (int j = 0; j < Nu; ++j) {
    if (is_fixed(st.u_lo[j], st.u_hi[j])) {
      rows.fixed_mask[j] = 1.0;
      rows.fixed_value[j] = st.u_lo[j];
      continue;
    }
    if (std::isfinite(st.u_lo[j])) rows.bound_rows.emplace_back(j, 1.0);
    if (std::isfinite(st.u_hi[j])) rows.bound_rows.emplace_back(j, -1.0);
  }
  const int m = rows.n_general + static_cast<int>(rows.bound_rows.size());
  rows.Gx.setZero(m, Nx);
  rows.Gu.setZero(m, Nu);
  rows.d.resize(m);
  if (rows.n_general > 0) {
    rows.Gx.topRows(rows.n_general) = st.D;
    rows.Gu.topRows(rows.n_general) = st.E;
    rows.d.head(rows.n_general) = st.d;
  }
  for (std::size_t k = 0; k < rows.bound_rows.size(); ++k) {
    const auto [j, sign] = rows.bound_rows[k];
    const int r = rows.n_general + static_cast<int>(k);
    rows.Gu(r, j) = sign;
    rows.d[r] = sign > 0 ? st.u_lo[j] : -st.u_hi[j];
  }
  return rows;
}

}  // namespace detail

template<int Nx, int Nu>
OcpQpSolution<Nx, Nu> solve_ocp_qp(const OcpQp<Nx, Nu> & prob, const Settings & set = {})
{
  using VecX = Eigen::Matrix<double, Nx, 1>;
  using VecU = Eigen::Matrix<double, Nu, 1>;
  using MatXX = Eigen::Matrix<double, Nx, Nx>;
  using MatUU = Eigen::Matrix<double, Nu, Nu>;
  using MatUX = Eigen::Matrix<double, Nu, Nx>;
  using Eigen::VectorXd;

  const std::size_t N = prob.stages.size();
  for (const auto & st : prob.stages) {
    if ((st.u_lo.array() > st.u_hi.array()).any()) {
      OcpQpSolution<Nx, Nu> r;
      r.status = Status::Infeasible;
      return r;
    }
  }
  std::vector<detail::StageRows<Nx, Nu>> rows;
  rows.reserve(N);
  Eigen::Index m_total = 0;
  for (const auto & st : prob.stages) {
    rows.push_back(detail::build_rows(st));
    m_total += rows.back().d.size();
  }

  // Initial point: inputs at the box center (or pinned value), dynamics rolled forward.
  std::vector<VecX> x(N + 1), lam(N + 1, VecX::Zero());
  std::vector<VecU> u(N);
  std::vector<VectorXd> s(N), z(N);
  x[0] = prob.x0;
  for (std::size_t k = 0; k < N; ++k) {
    const auto & st = prob.stages[k];
    for (int j = 0; j < Nu; ++j) {
      const double lo = st.u_lo[j], hi = st.u_hi[j];
      if (rows[k].fixed_mask[j] > 0) u[k][j] = rows[k].fixed_value[j];
      else if (std::isfinite(lo) && std::isfinite(hi)) u[k][j] = 0.5 * (lo + hi);
      else u[k][j] = std::clamp(0.0, lo, hi);
    }
    x[k + 1] = st.A * x[k] + st.B * u[k] + st.b;
    const VectorXd slack = rows[k].Gx * x[k] + rows[k].Gu * u[k] - rows[k].d;
    s[k] = slack.cwiseMax(1.0);
    z[k] = VectorXd::Ones(slack.size());
  }

  double gscale = 1.0 + prob.q_N.template lpNorm<Eigen::Infinity>();
  double bscale = 1.0, dscale = 1.0;
  for (std::size_t k = 0; k < N; ++k) {
    gscale = std::max(gscale, 1.0 + std::max(prob.stages[k].q.template lpNorm<Eigen::Infinity>(),
                                             prob.stages[k].r.template lpNorm<Eigen::Infinity>()));
    bscale = std::max(bscale, 1.0 + prob.stages[k].b.template lpNorm<Eigen::Infinity>());
    if (rows[k].d.size()) dscale = std::max(dscale, 1.0 + rows[k].d.template lpNorm<Eigen::Infinity>());
  }
  bscale = std::max(bscale, 1.0 + prob.x0.template lpNorm<Eigen::Infinity>());

  // Residuals.
  std::vector<VecX> rx(N + 1), rb(N);
  std::vector<VecU> ru(N);
  std::vector<VectorXd> ri(N), W(N);
  // Riccati factorization storage.
  std::vector<MatXX> P(N + 1);
  std::vector<MatUU> Ruu(N);
  std::vector<MatUX> Rux(N), K(N);
  std::vector<Eigen::LLT<MatUU>> llt(N);
  // Newton directions.
  std::vector<VecX> dx(N + 1), dlam(N + 1), p(N + 1);
  std::vector<VecU> du(N), kff(N);
  std::vector<VectorXd> ds(N), dz(N), rc(N);

  OcpQpSolution<Nx, Nu> sol;

  auto factorize = [&]() -> bool {
    P[N] = prob.Q_N;
    for (std::size_t kk = N; kk-- > 0;) {
      const auto & st = prob.stages[kk];
      const auto & rw = rows[kk];
      const MatXX & F = P[kk + 1];
      MatXX Qt = st.Q;
      MatUU Rt = st.R;
      MatUX St = st.S;
      if (rw.d.size()) {
        const auto GxW = rw.Gx.transpose() * W[kk].asDiagonal();
        const auto GuW = rw.Gu.transpose() * W[kk].asDiagonal();
        Qt.noalias() += GxW * rw.Gx;
        Rt.noalias() += GuW * rw.Gu;
        St.noalias() += GuW * rw.Gx;
      }
      Ruu[kk] = Rt + st.B.transpose() * F * st.B;
      Rux[kk] = St + st.B.transpose() * F * st.A;
      MatUU Rmod = Ruu[kk];
      MatUX Xmod = Rux[kk];
      for (int j = 0; j < Nu; ++j) {
        if (rw.fixed_mask[j] > 0) {
          Rmod.row(j).setZero();
          Rmod.col(j).setZero();
          Rmod(j, j) = 1.0;
          Xmod.row(j).setZero();
        }
      }
      llt[kk].compute(Rmod);
      if (llt[kk].info() != Eigen::Success) return false;
      K[kk] = -llt[kk].solve(Xmod);
      const MatXX Qxx = Qt + st.A.transpose() * F * st.A;
      MatXX Pk = Qxx + K[kk].transpose() * Rux[kk] + Rux[kk].transpose() * K[kk] + K[kk].transpose() * Ruu[kk] * K[kk];
      P[kk] = 0.5 * (Pk + Pk.transpose());
    }
    return true;
  };

  // Solves the Newton system for the current complementarity residual rc.
  auto newton = [&]() {
    // Modified gradients g_hat = (Hv + g) - G'z + G'(W ri + rc / s).
    std::vector<VecX> gx(N + 1);
    std::vector<VecU> gu(N);
    for (std::size_t k = 0; k < N; ++k) {
      const auto & st = prob.stages[k];
      const auto & rw = rows[k];
      gx[k] = st.Q * x[k] + st.S.transpose() * u[k] + st.q;
      gu[k] = st.R * u[k] + st.S * x[k] + st.r;
      if (rw.d.size()) {
        const VectorXd t = -z[k] + W[k].cwiseProduct(ri[k]) + rc[k].cwiseQuotient(s[k]);
        gx[k].noalias() += rw.Gx.transpose() * t;
        gu[k].noalias() += rw.Gu.transpose() * t;
      }
    }
    gx[N] = prob.Q_N * x[N] + prob.q_N;

    p[N] = gx[N];
    for (std::size_t kk = N; kk-- > 0;) {
      const auto & st = prob.stages[kk];
      const auto & rw = rows[kk];
      const VecX f = P[kk + 1] * rb[kk] + p[kk + 1];
      const VecU ruk = gu[kk] + st.B.transpose() * f;
      const VecX qx = gx[kk] + st.A.transpose() * f;
      VecU rmod = ruk;
      for (int j = 0; j < Nu; ++j) {
        if (rw.fixed_mask[j] > 0) rmod[j] = -(rw.fixed_value[j] - u[kk][j]);
      }
      // Couple pinned components into the free rows.
      for (int j = 0; j < Nu; ++j) {
        if (rw.fixed_mask[j] > 0) {
          const double c = rw.fixed_value[j] - u[kk][j];
          for (int i = 0; i < Nu; ++i) {
            if (rw.fixed_mask[i] == 0) rmod[i] += Ruu[kk](i, j) * c;
          }
        }
      }
      kff[kk] = -llt[kk].solve(rmod);
      p[kk] = qx + K[kk].transpose() * ruk + Rux[kk].transpose() * kff[kk] + K[kk].transpose() * Ruu[kk] * kff[kk];
    }

    dx[0].setZero();
    for (std::size_t k = 0; k < N; ++k) {
      const auto & st = prob.stages[k];
      du[k] = K[k] * dx[k] + kff[k];
      dx[k + 1] = st.A * dx[k] + st.B * du[k] + rb[k];
      dlam[k + 1] = P[k + 1] * dx[k + 1] + p[k + 1] - lam[k + 1];
      const auto & rw = rows[k];
      if (rw.d.size()) {
        ds[k] = rw.Gx * dx[k] + rw.Gu * du[k] + ri[k];
        dz[k] = -(rc[k] + z[k].cwiseProduct(ds[k])).cwiseQuotient(s[k]);
      } else {
        ds[k].resize(0);
        dz[k].resize(0);
      }
    }
  };

  auto step_bound = [&](double fraction) {
    double a = 1.0;
    for (std::size_t k = 0; k < N; ++k) {
      a = std::min(a, detail::max_step(s[k], ds[k], fraction));
      a = std::min(a, detail::max_step(z[k], dz[k], fraction));
    }
    return a;
  };

  for (int it = 0; it <= set.max_iterations; ++it) {
    sol.iterations = it;
    double rd_norm = 0.0, rb_norm = 0.0, ri_norm = 0.0, sz = 0.0;
    bool finite = true;
    for (std::size_t k = 0; k < N; ++k) {
      const auto & st = prob.stages[k];
      const auto & rw = rows[k];
      ru[k] = st.R * u[k] + st.S * x[k] + st.r + st.B.transpose() * lam[k + 1];
      rx[k] = st.Q * x[k] + st.S.transpose() * u[k] + st.q + st.A.transpose() * lam[k + 1] - lam[k];
      rb[k] = st.A * x[k] + st.B * u[k] + st.b - x[k + 1];
      if (rw.d.size()) {
        ru[k].noalias() -= rw.Gu.transpose() * z[k];
        rx[k].noalias() -= rw.Gx.transpose() * z[k];
        ri[k] = rw.Gx * x[k] + rw.Gu * u[k] - rw.d - s[k];
        ri_norm = std::max(ri_norm, ri[k].template lpNorm<Eigen::Infinity>());
        sz += s[k].dot(z[k]);
        finite = finite && s[k].allFinite() && z[k].allFinite();
      } else {
        ri[k].resize(0);
      }
      for (int j = 0; j < Nu; ++j) {
        if (rw.fixed_mask[j] > 0) ru[k][j] = 0.0;
      }
      rd_norm = std::max(rd_norm, ru[k].template lpNorm<Eigen::Infinity>());
      if (k > 0) rd_norm = std::max(rd_norm, rx[k].template lpNorm<Eigen::Infinity>());
      rb_norm = std::max(rb_norm, rb[k].template lpNorm<Eigen::Infinity>());
      finite = finite && x[k].allFinite() && u[k].allFinite();
    }
    rx[N] = prob.Q_N * x[N] + prob.q_N - lam[N];
    rd_norm = std::max(rd_norm, rx[N].template lpNorm<Eigen::Infinity>());
    const double mu = m_total ? sz / static_cast<double>(m_total) : 0.0;

    if (!finite || !std::isfinite(rd_norm) || !std::isfinite(rb_norm)) {
      sol.status = Status::NumericalFailure;
      break;
    }
    if (x[N].template lpNorm<Eigen::Infinity>() > 1e15) {
      sol.status = Status::Unbounded;
      break;
    }
    if (rd_norm <= set.tolerance * gscale && rb_norm <= set.tolerance * bscale &&
        ri_norm <= set.tolerance * dscale && mu <= set.tolerance) {
      sol.status = Status::Solved;
      break;
    }
    if (it == set.max_iterations) {
      sol.status = Status::MaxIterations;
      break;
    }

    for (std::size_t k = 0; k < N; ++k) W[k] = z[k].cwiseQuotient(s[k]);
    if (!factorize()) {
      sol.status = Status::NumericalFailure;
      break;
    }

    double alpha = 1.0;
    if (m_total > 0) {
      for (std::size_t k = 0; k < N; ++k) rc[k] = s[k].cwiseProduct(z[k]);
      newton();
      const double a_aff = step_bound(1.0);
      double sz_aff = 0.0;
      for (std::size_t k = 0; k < N; ++k) sz_aff += (s[k] + a_aff * ds[k]).dot(z[k] + a_aff * dz[k]);
      const double mu_aff = sz_aff / static_cast<double>(m_total);
      const double sigma = std::pow(mu_aff / mu, 3);
      for (std::size_t k = 0; k < N; ++k) {
        rc[k] = s[k].cwiseProduct(z[k]) + ds[k].cwiseProduct(dz[k]) - VectorXd::Constant(s[k].size(), sigma * mu);
      }
      newton();
      alpha = step_bound(set.step_fraction);
    } else {
      for (std::size_t k = 0; k < N; ++k) rc[k].resize(0);
      newton();
    }

    for (std::size_t k = 0; k < N; ++k) {
      x[k + 1] += alpha * dx[k + 1];
      u[k] += alpha * du[k];
      lam[k + 1] += alpha * dlam[k + 1];
      if (s[k].size()) {
        s[k] += alpha * ds[k];
        z[k] += alpha * dz[k];
      }
    }
  }

  sol.x = x;
  sol.u = u;
  sol.lambda = lam;
  sol.z_rows.resize(N);
  sol.z_bounds.assign(N, VecU::Zero());
  double obj = 0.5 * x[N].dot(prob.Q_N * x[N]) + prob.q_N.dot(x[N]);
  for (std::size_t k = 0; k < N; ++k) {
    const auto & st = prob.stages[k];
    const auto & rw = rows[k];
    sol.z_rows[k] = z[k].head(rw.n_general);
    for (std::size_t b = 0; b < rw.bound_rows.size(); ++b) {
      const auto [j, sign] = rw.bound_rows[b];
      sol.z_bounds[k][j] += sign * z[k][rw.n_general + static_cast<Eigen::Index>(b)];
    }
    obj += 0.5 * x[k].dot(st.Q * x[k]) + 0.5 * u[k].dot(st.R * u[k]) + u[k].dot(st.S * x[k]) + st.q.dot(x[k]) +
           st.r.dot(u[k]);
  }
  sol.objective = obj;
  return sol;
}

}  // namespace blendmpc::qp
