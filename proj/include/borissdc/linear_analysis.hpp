#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "borissdc/errors.hpp"
#include "borissdc/fields.hpp"
#include "borissdc/integrators.hpp"
#include "borissdc/quadrature.hpp"

namespace borissdc {

using Matrix6d = Eigen::Matrix<double, 6, 6>;

// Everything here works on the single-particle linear problem in the
// interleaved ordering u = (x_0, v_0, x_1, v_1, ..., x_M, v_M): entry 6m+j is
// position component j at node m, entry 6m+3+j the matching velocity.

/// Weight matrices of one step, detached from the node times so that a step
/// of length zero can be represented.
struct CollocationMatrices {
  int M = 0;
  bool last_node_is_end = false;  // tau_M == t_{n+1} (Lobatto)
  Eigen::MatrixXd Q, QQ, QE, QT, Qx;
  Eigen::RowVectorXd q, qQ;
};

inline CollocationMatrices collocation_matrices(const QuadratureRule& rule) {
  CollocationMatrices c;
  c.M = rule.M;
  c.last_node_is_end = rule.taus.back() == rule.t_right;
  c.Q = rule.Q;
  c.QQ = rule.QQ;
  c.QE = rule.verlet.QE;
  c.QT = rule.verlet.QT;
  c.Qx = rule.verlet.Qx;
  c.q = rule.q;
  c.qQ = rule.qQ;
  return c;
}

/// Matrices for a step of length dt >= 0, scaled from the unit-interval rule.
inline CollocationMatrices collocation_matrices(NodeFamily family, int m, double dt) {
  if (!(dt >= 0.0) || !std::isfinite(dt)) throw ParameterError("step length must be finite and non-negative");
  auto c = collocation_matrices(make_rule(family, m, 0.0, 1.0));
  const double h2 = dt * dt;
  c.Q *= dt;
  c.QE *= dt;
  c.QT *= dt;
  c.q *= dt;
  c.QQ *= h2;
  c.Qx *= h2;
  c.qQ *= h2;
  return c;
}

/// 6x6 map (x, v) -> (0, f) of the ideal trap, charge-to-mass alpha folded in.
inline Matrix6d build_linear_rhs(const PenningParams& p) {
  Matrix6d f = Matrix6d::Zero();
  const double e = -p.epsilon * p.omega_E * p.omega_E;
  f(3, 0) = e;
  f(4, 1) = e;
  f(5, 2) = -2.0 * e;
  f(3, 4) = p.omega_B;
  f(4, 3) = -p.omega_B;
  return f;
}

/// Energy quadratic form u^T H u of a particle with mass m.
inline Matrix6d energy_form(const PenningParams& p, double mass = 1.0) {
  const double e = p.epsilon * p.omega_E * p.omega_E;
  Matrix6d h = Matrix6d::Zero();
  h.diagonal() << e, e, -2.0 * e, 1.0, 1.0, 1.0;
  return 0.5 * mass * h;
}

namespace detail {

/// Places w (x) pattern into the 6(M+1) layout: block (m, l) gets w(m, l) at (row_off + j, col_off + j).
inline void add_pattern(Eigen::MatrixXd& out, const Eigen::MatrixXd& w, int row_off, int col_off) {
  for (Eigen::Index m = 0; m < w.rows(); ++m)
    for (Eigen::Index l = 0; l < w.cols(); ++l)
      if (w(m, l) != 0.0)
        for (int j = 0; j < 3; ++j) out(6 * m + row_off + j, 6 * l + col_off + j) += w(m, l);
}

}  // namespace detail

/// Solves the block lower-triangular system A y = b node by node (6x6 diagonal blocks).
inline Eigen::MatrixXd forward_substitute(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::Index blocks = a.rows() / 6;
  Eigen::MatrixXd y(b.rows(), b.cols());
  for (Eigen::Index m = 0; m < blocks; ++m) {
    Eigen::MatrixXd r = b.middleRows(6 * m, 6);
    for (Eigen::Index l = 0; l < m; ++l) r -= a.block(6 * m, 6 * l, 6, 6) * y.middleRows(6 * l, 6);
    const Matrix6d d = a.block(6 * m, 6 * m, 6, 6);
    const Eigen::FullPivLU<Matrix6d> lu(d);
    if (!lu.isInvertible()) throw NumericalError("singular diagonal block in preconditioner");
    y.middleRows(6 * m, 6) = lu.solve(r);
  }
  return y;
}

struct LinearSystemOperators {
  int M = 0;
  int k = 0;
  bool last_node_is_end = false;
  Eigen::MatrixXd F_rhs;
  Eigen::MatrixXd M_coll, C_coll, Q_coll;
  Eigen::MatrixXd M_vv, C_vv, Q_vv;
  Eigen::MatrixXd K_sdc;
  Eigen::MatrixXd P_sdc_k;
  Eigen::MatrixXd P_coll;
  Eigen::MatrixXd T_P, T_R;
  Eigen::MatrixXd C_tilde, Q_tilde;
  Eigen::MatrixXd Minv_C;  // M_vv^{-1} C_coll
  Matrix6d P_coll_tilde;
  Matrix6d P_sdc_tilde;
  Matrix6d H;
  Matrix6d H_hat;
};

/// Step map u0 -> u_{n+1} from node values U = (operator) T_P u0. With
/// last_node the node-M block is taken, otherwise the collocation end update
/// C~ T_P + Q~ F U.
inline Matrix6d end_map(const LinearSystemOperators& ops, const Eigen::MatrixXd& nodes_from_u0, bool last_node) {
  if (last_node) return ops.T_R * nodes_from_u0;
  return ops.C_tilde * ops.T_P + ops.Q_tilde * ops.F_rhs * nodes_from_u0;
}

/// Dense operators of the collocation problem, its velocity-Verlet
/// preconditioner and k Boris-SDC sweeps. For Lobatto nodes (with Auto) the
/// SDC step result is the last node, the value the sweep actually produces.
inline LinearSystemOperators assemble_operators(const PenningParams& params, const CollocationMatrices& c, int k,
                                                EndUpdate end = EndUpdate::Auto) {
  if (k < 0) throw ParameterError("sweep count must be non-negative");
  if (c.Q.rows() != c.M + 1 || c.QE.rows() != c.M + 1) throw ParameterError("matrix sizes disagree with M");
  const int n = 6 * (c.M + 1);
  LinearSystemOperators o;
  o.M = c.M;
  o.k = k;
  o.last_node_is_end = c.last_node_is_end;

  const Matrix6d f = build_linear_rhs(params);
  o.F_rhs = Eigen::MatrixXd::Zero(n, n);
  for (int m = 0; m <= c.M; ++m) o.F_rhs.block(6 * m, 6 * m, 6, 6) = f;

  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
  o.Q_coll = Eigen::MatrixXd::Zero(n, n);
  detail::add_pattern(o.Q_coll, c.QQ, 0, 3);
  detail::add_pattern(o.Q_coll, c.Q, 3, 3);
  o.C_coll = id;
  detail::add_pattern(o.C_coll, c.Q, 0, 3);
  o.M_coll = id - o.Q_coll * o.F_rhs;

  o.Q_vv = Eigen::MatrixXd::Zero(n, n);
  detail::add_pattern(o.Q_vv, c.Qx, 0, 3);
  detail::add_pattern(o.Q_vv, c.QT, 3, 3);
  o.C_vv = id;
  detail::add_pattern(o.C_vv, c.QE, 0, 3);
  o.M_vv = id - o.Q_vv * o.F_rhs;

  o.K_sdc = forward_substitute(o.M_vv, (o.Q_coll - o.Q_vv) * o.F_rhs);
  o.Minv_C = forward_substitute(o.M_vv, o.C_coll);
  o.P_sdc_k = id;
  for (int i = 0; i < k; ++i) o.P_sdc_k = o.K_sdc * o.P_sdc_k + o.Minv_C;

  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(o.M_coll);
  o.P_coll = lu.solve(o.C_coll);
  if (!o.P_coll.allFinite()) throw NumericalError("collocation system could not be solved");

  o.T_P = Eigen::MatrixXd::Zero(n, 6);
  for (int m = 0; m <= c.M; ++m) o.T_P.block(6 * m, 0, 6, 6).setIdentity();
  o.T_R = Eigen::MatrixXd::Zero(6, n);
  o.T_R.block(0, 6 * c.M, 6, 6).setIdentity();

  // C~ = T_R + q (x) I_xv,  Q~ = qQ (x) I_x + q (x) I_v
  o.C_tilde = o.T_R;
  o.Q_tilde = Eigen::MatrixXd::Zero(6, n);
  for (int l = 0; l <= c.M; ++l) {
    for (int j = 0; j < 3; ++j) {
      o.C_tilde(j, 6 * l + 3 + j) += c.q(l);
      o.Q_tilde(j, 6 * l + 3 + j) += c.qQ(l);
      o.Q_tilde(3 + j, 6 * l + 3 + j) += c.q(l);
    }
  }

  const bool last = end == EndUpdate::LastNode || (end == EndUpdate::Auto && c.last_node_is_end);
  o.P_coll_tilde = end_map(o, o.P_coll * o.T_P, false);
  o.P_sdc_tilde = end_map(o, o.P_sdc_k * o.T_P, last);
  o.H = energy_form(params);
  o.H_hat = o.P_sdc_tilde.transpose() * o.H * o.P_sdc_tilde - o.H;
  return o;
}

inline LinearSystemOperators assemble_operators(const PenningParams& params, const QuadratureRule& rule, int k,
                                                EndUpdate end = EndUpdate::Auto) {
  return assemble_operators(params, collocation_matrices(rule), k, end);
}

/// Largest eigenvalue modulus of a square matrix.
inline double spectral_radius(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw ParameterError("spectral radius needs a square matrix");
  if (a.rows() == 0) return 0.0;
  if (!a.allFinite()) throw NumericalError("operator has non-finite entries");
  const Eigen::EigenSolver<Eigen::MatrixXd> es(a, false);
  if (es.info() != Eigen::Success) throw NumericalError("eigenvalue computation did not converge");
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Spectral radius for stability decisions. Eigenvalues closer than
/// cluster_tol (relative) are replaced by their mean: a defective unit
/// eigenvalue splits by O(sqrt(eps)) under rounding, the cluster mean only by
/// O(eps), so marginally stable points are not misread as unstable.
inline double stability_radius(const Eigen::MatrixXd& a, double cluster_tol = 1e-6) {
  if (a.rows() != a.cols()) throw ParameterError("spectral radius needs a square matrix");
  if (a.rows() == 0) return 0.0;
  if (!a.allFinite()) throw NumericalError("operator has non-finite entries");
  const Eigen::EigenSolver<Eigen::MatrixXd> es(a, false);
  if (es.info() != Eigen::Success) throw NumericalError("eigenvalue computation did not converge");
  const auto& ev = es.eigenvalues();
  std::vector<bool> used(static_cast<std::size_t>(ev.size()), false);
  double rho = 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (used[static_cast<std::size_t>(i)]) continue;
    std::complex<double> sum = ev(i);
    int count = 1;
    for (Eigen::Index j = i + 1; j < ev.size(); ++j) {
      if (!used[static_cast<std::size_t>(j)] && std::abs(ev(j) - ev(i)) <= cluster_tol * std::max(1.0, std::abs(ev(i)))) {
        sum += ev(j);
        ++count;
        used[static_cast<std::size_t>(j)] = true;
      }
    }
    rho = std::max(rho, std::abs(sum / static_cast<double>(count)));
  }
  return rho;
}

/// One velocity-Verlet/Boris step as a 6x6 matrix, from propagating the unit states.
inline Matrix6d classical_boris_matrix(const PenningParams& params, double dt) {
  const PenningTrap trap(params);
  Matrix6d p;
  for (int j = 0; j < 6; ++j) {
    PhaseState s{{Vec3{}}, {Vec3{}}};
    if (j < 3)
      s.x[0][j] = 1.0;
    else
      s.v[0][j - 3] = 1.0;
    const auto out = classical_boris_step(s, dt, trap);
    for (int c = 0; c < 3; ++c) {
      p(c, j) = out.x[0][c];
      p(3 + c, j) = out.v[0][c];
    }
  }
  return p;
}

// --- residual-controlled sweep count -------------------------------------------

/// Which phase-space components an analysis looks at. The external fields
/// decouple the (x, y) plane from z; Transverse keeps x, y, vx, vy only.
enum class PhaseSubspace { Full, Transverse };

inline std::vector<int> subspace_components(PhaseSubspace s) {
  if (s == PhaseSubspace::Transverse) return {0, 1, 3, 4};
  return {0, 1, 2, 3, 4, 5};
}

/// Restriction of a node-ordered operator (6(M+1) or 6 square) to the subspace components.
inline Eigen::MatrixXd restrict_to(const Eigen::MatrixXd& a, PhaseSubspace s) {
  const auto comp = subspace_components(s);
  std::vector<Eigen::Index> idx;
  for (Eigen::Index m = 0; m < a.rows() / 6; ++m)
    for (int c : comp) idx.push_back(6 * m + c);
  Eigen::MatrixXd r(idx.size(), idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) r(i, j) = a(idx[i], idx[j]);
  return r;
}

/// Residual C_coll u0 - M_coll u^k for each unit initial state in the
/// subspace, measured like the integrator (max over nodes 1..M of the
/// per-node x and v block norms) and maximised over the unit states.
inline double residual_of(const LinearSystemOperators& o, const Eigen::MatrixXd& nodes_from_u0, PhaseSubspace s) {
  const Eigen::MatrixXd r = o.C_coll * o.T_P - o.M_coll * nodes_from_u0;
  double worst = 0.0;
  for (int j : subspace_components(s)) {
    for (int m = 1; m <= o.M; ++m) {
      worst = std::max(worst, r.block(6 * m, j, 3, 1).norm());
      worst = std::max(worst, r.block(6 * m + 3, j, 3, 1).norm());
    }
  }
  return std::isfinite(worst) ? worst : std::numeric_limits<double>::infinity();
}

struct ToleranceUpdate {
  Matrix6d P_tilde;
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

/// Boris-SDC step operator with the sweep count chosen like the integrator's
/// residual mode: at least one sweep, then until r <= tol or k = K_max.
inline ToleranceUpdate sdc_update_at_tolerance(const LinearSystemOperators& o, double tol, int k_max,
                                               PhaseSubspace s = PhaseSubspace::Full, EndUpdate end = EndUpdate::Auto) {
  if (!(tol > 0.0) || k_max < 1) throw ParameterError("tolerance must be positive and K_max >= 1");
  const Eigen::MatrixXd g = o.Minv_C * o.T_P;
  Eigen::MatrixXd y = o.T_P;
  ToleranceUpdate out;
  do {
    y = o.K_sdc * y + g;
    ++out.iterations;
    out.residual = residual_of(o, y, s);
    if (!std::isfinite(out.residual)) break;
  } while (out.residual > tol && out.iterations < k_max);
  out.converged = out.residual <= tol;
  const bool last = end == EndUpdate::LastNode || (end == EndUpdate::Auto && o.last_node_is_end);
  out.P_tilde = end_map(o, y, last);
  return out;
}

// --- maps ----------------------------------------------------------------------

enum class MapMethod { ClassicalBoris, Collocation, BorisSdc };

inline std::string to_string(MapMethod m) {
  switch (m) {
    case MapMethod::ClassicalBoris: return "boris";
    case MapMethod::Collocation: return "collocation";
    case MapMethod::BorisSdc: return "boris-sdc";
  }
  return "?";
}

/// Sample grid over (eps omega_E dt, omega_B dt). The sign of the first
/// coordinate selects epsilon; dt is normalised to 1.
struct MapGrid {
  double e_min = -4.0;
  double e_max = 4.0;
  int e_points = 201;
  double b_min = 0.0;
  double b_max = 20.0;
  int b_points = 201;

  void validate() const {
    if (!std::isfinite(e_min) || !std::isfinite(e_max) || !std::isfinite(b_min) || !std::isfinite(b_max))
      throw ParameterError("map bounds must be finite");
    if (e_points < 1 || b_points < 1) throw ParameterError("map needs at least one point per axis");
    if (e_max < e_min || b_max < b_min) throw ParameterError("map bounds are reversed");
    if (b_min < 0.0) throw ParameterError("omega_B dt must be non-negative");
  }
  [[nodiscard]] double e_at(int i) const { return e_points == 1 ? e_min : e_min + i * (e_max - e_min) / (e_points - 1); }
  [[nodiscard]] double b_at(int j) const { return b_points == 1 ? b_min : b_min + j * (b_max - b_min) / (b_points - 1); }
};

/// Trap parameters with dt = 1 reproducing the grid point (e, b).
inline PenningParams map_params(double e, double b) {
  PenningParams p;
  p.alpha = 1.0;
  p.epsilon = e > 0.0 ? 1 : -1;
  p.omega_E = std::abs(e);
  p.omega_B = b;
  return p;
}

struct MapOptions {
  MapMethod method = MapMethod::Collocation;
  NodeFamily family = NodeFamily::GaussLobatto;
  int M = 3;
  double tol = 1e-12;
  int K_max = 100;
  PhaseSubspace subspace = PhaseSubspace::Transverse;
  double stability_slack = 1e-9;
  unsigned threads = 1;
};

struct MapPoint {
  double e = 0.0;
  double b = 0.0;
  double value = 0.0;
  bool physical_stable = true;
  bool numerical_stable = true;
  int iterations = 0;
  std::string status = "ok";
};

struct MapResult {
  MapGrid grid;
  std::vector<MapPoint> points;  // row-major over b, then e

  [[nodiscard]] const MapPoint& at(int i_e, int j_b) const {
    return points[static_cast<std::size_t>(j_b) * static_cast<std::size_t>(grid.e_points) + static_cast<std::size_t>(i_e)];
  }
  [[nodiscard]] std::size_t count_stable() const {
    return static_cast<std::size_t>(std::count_if(points.begin(), points.end(), [](const MapPoint& p) { return p.numerical_stable; }));
  }
};

namespace detail {

template <class PointFn>
MapResult evaluate_grid(const MapGrid& grid, unsigned threads, PointFn&& fn) {
  grid.validate();
  MapResult res;
  res.grid = grid;
  const std::size_t total = static_cast<std::size_t>(grid.e_points) * static_cast<std::size_t>(grid.b_points);
  res.points.resize(total);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t idx = next++; idx < total; idx = next++) {
      const int i = static_cast<int>(idx % static_cast<std::size_t>(grid.e_points));
      const int j = static_cast<int>(idx / static_cast<std::size_t>(grid.e_points));
      MapPoint& pt = res.points[idx];
      pt.e = grid.e_at(i);
      pt.b = grid.b_at(j);
      const auto params = map_params(pt.e, pt.b);
      pt.physical_stable = params.physically_stable();
      try {
        fn(params, pt);
      } catch (const std::exception& ex) {
        pt.value = std::numeric_limits<double>::infinity();
        pt.numerical_stable = false;
        pt.status = std::string("error: ") + ex.what();
      }
    }
  };
  const unsigned n = std::max(1u, threads);
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return res;
}

}  // namespace detail

/// Spectral radius of the one-step update at every grid point; stable iff rho <= 1 + slack.
inline MapResult stability_map(const MapGrid& grid, const MapOptions& opt) {
  const auto unit = collocation_matrices(opt.family, opt.M, 1.0);
  return detail::evaluate_grid(grid, opt.threads, [&](const PenningParams& p, MapPoint& pt) {
    Matrix6d update;
    if (opt.method == MapMethod::ClassicalBoris) {
      update = classical_boris_matrix(p, 1.0);
      pt.iterations = 1;
    } else {
      const auto ops = assemble_operators(p, unit, 0);
      if (opt.method == MapMethod::Collocation) {
        update = ops.P_coll_tilde;
      } else {
        const auto tu = sdc_update_at_tolerance(ops, opt.tol, opt.K_max, opt.subspace);
        update = tu.P_tilde;
        pt.iterations = tu.iterations;
        if (!tu.converged) pt.status = "kmax";
      }
    }
    if (!update.allFinite()) {
      pt.value = std::numeric_limits<double>::infinity();
      pt.numerical_stable = false;
      pt.status = "overflow";
      return;
    }
    pt.value = stability_radius(restrict_to(update, opt.subspace));
    pt.numerical_stable = pt.value <= 1.0 + opt.stability_slack;
  });
}

/// Spectral radius of the SDC iteration matrix K_sdc; "stable" here means convergent (rho < 1).
inline MapResult convergence_map(const MapGrid& grid, const MapOptions& opt) {
  const auto unit = collocation_matrices(opt.family, opt.M, 1.0);
  return detail::evaluate_grid(grid, opt.threads, [&](const PenningParams& p, MapPoint& pt) {
    const auto ops = assemble_operators(p, unit, 0);
    pt.value = spectral_radius(restrict_to(ops.K_sdc, opt.subspace));
    pt.numerical_stable = pt.value < 1.0;
  });
}

struct EnergyDiagnostic {
  double max_diag = 0.0;  // max_i |H^_ii|
  int iterations = 0;
  bool converged = false;
  Matrix6d H_hat;
};

/// max |diag(P~^T H P~ - H)| for Boris-SDC with the sweep count set by tol.
inline EnergyDiagnostic energy_diagnostic(const PenningParams& params, const CollocationMatrices& c, double tol,
                                          int k_max = 100, PhaseSubspace s = PhaseSubspace::Full) {
  const auto ops = assemble_operators(params, c, 0);
  const auto tu = sdc_update_at_tolerance(ops, tol, k_max, s);
  EnergyDiagnostic d;
  d.iterations = tu.iterations;
  d.converged = tu.converged;
  d.H_hat = tu.P_tilde.transpose() * ops.H * tu.P_tilde - ops.H;
  d.max_diag = 0.0;
  for (int i : subspace_components(s)) {
    const double v = std::abs(d.H_hat(i, i));
    d.max_diag = std::isfinite(v) ? std::max(d.max_diag, v) : std::numeric_limits<double>::infinity();
  }
  return d;
}

/// Energy map: value = max |H^_ii| per point; numerical_stable marks values at or below 1e-8.
inline MapResult energy_map(const MapGrid& grid, const MapOptions& opt) {
  const auto unit = collocation_matrices(opt.family, opt.M, 1.0);
  return detail::evaluate_grid(grid, opt.threads, [&](const PenningParams& p, MapPoint& pt) {
    const auto d = energy_diagnostic(p, unit, opt.tol, opt.K_max, PhaseSubspace::Full);
    pt.value = d.max_diag;
    pt.iterations = d.iterations;
    if (!d.converged) pt.status = "kmax";
    pt.numerical_stable = d.max_diag <= 1e-8;
  });
}

}  // namespace borissdc
