#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "borissdc/boris_kernel.hpp"
#include "borissdc/errors.hpp"
#include "borissdc/fields.hpp"
#include "borissdc/quadrature.hpp"
#include "borissdc/vec3.hpp"

namespace borissdc {

/// Anything that supplies the electric field at all particle positions, the
/// magnetic field at a point and per-particle charge-to-mass ratios. The
/// acceleration is then alpha_i (E_i + v_i x B(x_i)).
template <class F>
concept ForceModel = requires(const F& f, std::span<const Vec3> x, std::span<Vec3> out, const Vec3& p, std::size_t i) {
  { f.particle_count() } -> std::convertible_to<std::size_t>;
  f.electric_field(x, out);
  { f.magnetic_field(p) } -> std::convertible_to<Vec3>;
  { f.charge_to_mass(i) } -> std::convertible_to<double>;
};

template <class F>
concept HasEnergy = requires(const F& f, std::span<const Vec3> x) {
  { f.total_energy(x, x) } -> std::convertible_to<double>;
};

// --- compensated accumulation ------------------------------------------------

/// Kahan update of sum += delta with running compensation.
inline void kahan_add(double& sum, double& carry, double delta) noexcept {
  const double y = delta - carry;
  const double t = sum + y;
  carry = (t - sum) - y;
  sum = t;
}

inline void kahan_add(Vec3& sum, Vec3& carry, const Vec3& delta) noexcept {
  kahan_add(sum.x, carry.x, delta.x);
  kahan_add(sum.y, carry.y, delta.y);
  kahan_add(sum.z, carry.z, delta.z);
}

/// Neumaier-compensated vector sum.
class CompensatedVec3Sum {
 public:
  void add(const Vec3& a) noexcept {
    for (int c = 0; c < 3; ++c) {
      const double t = sum_[c] + a[c];
      if (std::abs(sum_[c]) >= std::abs(a[c]))
        comp_[c] += (sum_[c] - t) + a[c];
      else
        comp_[c] += (a[c] - t) + sum_[c];
      sum_[c] = t;
    }
  }
  [[nodiscard]] Vec3 value() const noexcept { return sum_ + comp_; }

 private:
  Vec3 sum_;
  Vec3 comp_;
};

// --- node storage --------------------------------------------------------------

/// (M+1) x N array of vectors, node-major.
class NodeArray {
 public:
  NodeArray() = default;
  NodeArray(int nodes, std::size_t particles)
      : particles_(particles), data_(static_cast<std::size_t>(nodes) * particles) {}

  Vec3& operator()(int m, std::size_t i) noexcept { return data_[static_cast<std::size_t>(m) * particles_ + i]; }
  const Vec3& operator()(int m, std::size_t i) const noexcept {
    return data_[static_cast<std::size_t>(m) * particles_ + i];
  }
  std::span<Vec3> node(int m) noexcept { return {data_.data() + static_cast<std::size_t>(m) * particles_, particles_}; }
  std::span<const Vec3> node(int m) const noexcept {
    return {data_.data() + static_cast<std::size_t>(m) * particles_, particles_};
  }
  [[nodiscard]] bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](const Vec3& a) { return isfinite(a); });
  }

 private:
  std::size_t particles_ = 0;
  std::vector<Vec3> data_;
};

/// Node values of one time step at the current iterate (X, V, F, E) and the
/// scratch arrays the next sweep writes into. DX/DV hold X - x0 and V - v0
/// as accumulated by the sweep, so step increments carry no cancellation.
struct SweepWorkspace {
  int M = 0;
  std::size_t N = 0;
  std::vector<Vec3> x0;
  std::vector<Vec3> v0;
  NodeArray X, V, F, E, DX, DV;
  NodeArray X1, V1, F1, E1, DX1, DV1;
  std::size_t rhs_evals = 0;
  int iterations = 0;
  std::size_t step = 0;  // for error reporting only

  SweepWorkspace(int m, std::size_t n)
      : M(m), N(n), X(m + 1, n), V(m + 1, n), F(m + 1, n), E(m + 1, n), DX(m + 1, n), DV(m + 1, n), X1(m + 1, n),
        V1(m + 1, n), F1(m + 1, n), E1(m + 1, n), DX1(m + 1, n), DV1(m + 1, n) {}

  void swap_iterates() noexcept {
    std::swap(X, X1);
    std::swap(V, V1);
    std::swap(F, F1);
    std::swap(E, E1);
    std::swap(DX, DX1);
    std::swap(DV, DV1);
  }
};

namespace detail {

/// Field evaluation at node m of (X, V): fills E and F. Counts as one right-hand-side evaluation.
template <ForceModel Model>
void evaluate_node(const Model& model, int m, const NodeArray& X, const NodeArray& V, NodeArray& E, NodeArray& F) {
  model.electric_field(X.node(m), E.node(m));
  for (std::size_t i = 0; i < X.node(m).size(); ++i)
    F(m, i) = model.charge_to_mass(i) * (E(m, i) + cross(V(m, i), model.magnetic_field(X(m, i))));
}

template <ForceModel Model>
void require_particles(const Model& model, const PhaseState& u) {
  if (u.x.size() != model.particle_count() || u.v.size() != model.particle_count())
    throw ParameterError("state has " + std::to_string(u.x.size()) + " particles, force model expects " +
                         std::to_string(model.particle_count()));
}

}  // namespace detail

// --- classical Boris ---------------------------------------------------------

enum class VelocitySolve { BorisRotation, LinearSolve };

/// Trapezoidal velocity update solved as a dense 3x3 system instead of by rotation.
inline Vec3 implicit_velocity_update(const Vec3& v_old, double dt, double alpha, const Vec3& E_mid, const Vec3& B_old,
                                     const Vec3& B_new, const Vec3& c_term) {
  // v - (alpha dt / 2) v x B_new = v_old + dt (alpha E_mid + c) + (alpha dt / 2) v_old x B_old
  const double h = 0.5 * alpha * dt;
  Eigen::Matrix3d a;
  a << 1.0, -h * B_new.z, h * B_new.y,  //
      h * B_new.z, 1.0, -h * B_new.x,   //
      -h * B_new.y, h * B_new.x, 1.0;
  const Vec3 rhs = v_old + dt * (alpha * E_mid + c_term) + h * cross(v_old, B_old);
  const Eigen::Vector3d sol = a.partialPivLu().solve(Eigen::Vector3d(rhs.x, rhs.y, rhs.z));
  return {sol(0), sol(1), sol(2)};
}

/// Velocity-Verlet stepping with the velocity equation solved by the Boris
/// rotation (or, for cross-checks, by a direct linear solve). Caches E at the
/// current positions so each step costs one field evaluation.
template <ForceModel Model>
class BorisStepper {
 public:
  BorisStepper(const Model& model, PhaseState state, VelocitySolve solve = VelocitySolve::BorisRotation)
      : model_(model), state_(std::move(state)), solve_(solve) {
    detail::require_particles(model_, state_);
    e_.resize(state_.size());
    e_next_.resize(state_.size());
    carry_x_.assign(state_.size(), Vec3{});
    carry_v_.assign(state_.size(), Vec3{});
    model_.electric_field(state_.x, e_);
    rhs_evals_ = 1;
  }

  void step(double dt, bool compensated = false) {
    const std::size_t n = state_.size();
    next_x_.resize(n);
    dx_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = model_.charge_to_mass(i);
      const Vec3 f = a * (e_[i] + cross(state_.v[i], model_.magnetic_field(state_.x[i])));
      dx_[i] = dt * (state_.v[i] + (0.5 * dt) * f);
      next_x_[i] = state_.x[i] + dx_[i];
    }
    model_.electric_field(next_x_, e_next_);
    ++rhs_evals_;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = model_.charge_to_mass(i);
      const Vec3 e_mid = 0.5 * (e_[i] + e_next_[i]);
      const Vec3 b_old = model_.magnetic_field(state_.x[i]);
      const Vec3 b_new = model_.magnetic_field(next_x_[i]);
      const Vec3 dv = solve_ == VelocitySolve::BorisRotation
                          ? boris_velocity_increment(state_.v[i], dt, a, e_mid, b_old, b_new, Vec3{})
                          : implicit_velocity_update(state_.v[i], dt, a, e_mid, b_old, b_new, Vec3{}) - state_.v[i];
      if (compensated) {
        kahan_add(state_.x[i], carry_x_[i], dx_[i]);
        kahan_add(state_.v[i], carry_v_[i], dv);
      } else {
        state_.x[i] = next_x_[i];
        state_.v[i] += dv;
      }
    }
    std::swap(e_, e_next_);
  }

  [[nodiscard]] const PhaseState& state() const noexcept { return state_; }
  [[nodiscard]] std::size_t rhs_evals() const noexcept { return rhs_evals_; }

 private:
  const Model& model_;
  PhaseState state_;
  VelocitySolve solve_;
  std::vector<Vec3> e_, e_next_, next_x_, dx_, carry_x_, carry_v_;
  std::size_t rhs_evals_ = 0;
};

/// One velocity-Verlet/Boris step:
///   x' = x + dt (v + dt/2 f(x, v)),  v' from the trapezoidal rule with E averaged over x and x'.
template <ForceModel Model>
PhaseState classical_boris_step(const PhaseState& state, double dt, const Model& model,
                                VelocitySolve solve = VelocitySolve::BorisRotation) {
  if (!(dt > 0.0)) throw ParameterError("time step must be positive");
  BorisStepper<Model> stepper(model, state, solve);
  stepper.step(dt);
  return stepper.state();
}

// --- SDC building blocks -----------------------------------------------------

enum class InitPolicy { CopyOnce, EvaluateEveryNode };

/// Copies the initial value to every node (the k = 0 iterate).
template <ForceModel Model>
SweepWorkspace sweep_initialize(const PhaseState& u0, const QuadratureRule& rule, const Model& model,
                                InitPolicy policy = InitPolicy::CopyOnce) {
  detail::require_particles(model, u0);
  SweepWorkspace ws(rule.M, u0.size());
  ws.x0 = u0.x;
  ws.v0 = u0.v;
  for (int m = 0; m <= rule.M; ++m) {
    for (std::size_t i = 0; i < ws.N; ++i) {
      ws.X(m, i) = u0.x[i];
      ws.V(m, i) = u0.v[i];
    }
  }
  if (policy == InitPolicy::EvaluateEveryNode) {
    for (int m = 0; m <= rule.M; ++m) detail::evaluate_node(model, m, ws.X, ws.V, ws.E, ws.F);
    ws.rhs_evals = static_cast<std::size_t>(rule.M) + 1;
  } else {
    detail::evaluate_node(model, 0, ws.X, ws.V, ws.E, ws.F);
    for (int m = 1; m <= rule.M; ++m) {
      for (std::size_t i = 0; i < ws.N; ++i) {
        ws.E(m, i) = ws.E(0, i);
        ws.F(m, i) = ws.F(0, i);
      }
    }
    ws.rhs_evals = 1;
  }
  ws.iterations = 0;
  return ws;
}

/// One node-to-node Boris-SDC sweep. Positions are explicit; the velocity at
/// node m+1 is a Boris-type solve with the known correction c^k folded into
/// the half kicks. Costs M field evaluations.
template <ForceModel Model>
void sdc_sweep(SweepWorkspace& ws, const QuadratureRule& rule, const Model& model) {
  const int M = rule.M;
  for (std::size_t i = 0; i < ws.N; ++i) {
    ws.X1(0, i) = ws.x0[i];
    ws.V1(0, i) = ws.v0[i];
    ws.DX1(0, i) = Vec3{};
    ws.DV1(0, i) = Vec3{};
    ws.E1(0, i) = ws.E(0, i);
    ws.F1(0, i) = ws.F(0, i);
  }
  for (int m = 0; m < M; ++m) {
    const int next = m + 1;
    const double dt = rule.delta(next);
    for (std::size_t i = 0; i < ws.N; ++i) {
      Vec3 d = dt * ws.v0[i];
      for (int l = 1; l <= m; ++l) d += rule.Sx(next, l) * (ws.F1(l, i) - ws.F(l, i));
      for (int l = 1; l <= M; ++l) d += rule.SQ(next, l) * ws.F(l, i);
      ws.DX1(next, i) = ws.DX1(m, i) + d;
      ws.X1(next, i) = ws.x0[i] + ws.DX1(next, i);
    }
    model.electric_field(ws.X1.node(next), ws.E1.node(next));
    ++ws.rhs_evals;
    for (std::size_t i = 0; i < ws.N; ++i) {
      // dt * c^k = -dt/2 (f^k_{m+1} + f^k_m) + sum_l s_{m+1,l} f^k_l
      Vec3 dtc = (-0.5 * dt) * (ws.F(next, i) + ws.F(m, i));
      for (int l = 1; l <= M; ++l) dtc += rule.S(next, l) * ws.F(l, i);
      const double a = model.charge_to_mass(i);
      const Vec3 b_new = model.magnetic_field(ws.X1(next, i));
      Vec3 dv = dtc;
      if (dt != 0.0) {
        const Vec3 e_mid = 0.5 * (ws.E1(m, i) + ws.E1(next, i));
        dv = boris_velocity_increment(ws.V1(m, i), dt, a, e_mid, model.magnetic_field(ws.X1(m, i)), b_new, dtc / dt);
      }
      ws.DV1(next, i) = ws.DV1(m, i) + dv;
      ws.V1(next, i) = ws.v0[i] + ws.DV1(next, i);
      ws.F1(next, i) = a * (ws.E1(next, i) + cross(ws.V1(next, i), b_new));
    }
  }
  if (!ws.X1.all_finite() || !ws.V1.all_finite()) throw DivergenceError("non-finite node values in SDC sweep", ws.step);
  ws.swap_iterates();
  ++ws.iterations;
}

/// Unpreconditioned (Picard) iteration u^{k+1} = C_coll u0 + Q_coll f(u^k).
template <ForceModel Model>
void picard_sweep(SweepWorkspace& ws, const QuadratureRule& rule, const Model& model) {
  const int M = rule.M;
  for (int m = 0; m <= M; ++m) {
    const double span = rule.taus[static_cast<std::size_t>(m)] - rule.taus[0];
    for (std::size_t i = 0; i < ws.N; ++i) {
      Vec3 dx = span * ws.v0[i];
      Vec3 dv;
      for (int l = 1; l <= M; ++l) {
        dx += rule.QQ(m, l) * ws.F(l, i);
        dv += rule.Q(m, l) * ws.F(l, i);
      }
      ws.DX1(m, i) = dx;
      ws.DV1(m, i) = dv;
      ws.X1(m, i) = ws.x0[i] + dx;
      ws.V1(m, i) = ws.v0[i] + dv;
    }
  }
  if (!ws.X1.all_finite() || !ws.V1.all_finite())
    throw DivergenceError("non-finite node values in Picard sweep", ws.step);
  for (std::size_t i = 0; i < ws.N; ++i) {
    ws.E1(0, i) = ws.E(0, i);
    ws.F1(0, i) = ws.F(0, i);
  }
  for (int m = 1; m <= M; ++m) detail::evaluate_node(model, m, ws.X1, ws.V1, ws.E1, ws.F1);
  ws.rhs_evals += static_cast<std::size_t>(M);
  ws.swap_iterates();
  ++ws.iterations;
}

struct ResidualParts {
  double x = 0.0;
  double v = 0.0;
  [[nodiscard]] double combined() const noexcept { return std::max(x, v); }
};

/// Collocation defect C_coll u0 - M_coll u^k, split into position and
/// velocity blocks. Each block is the max over nodes 1..M of the Euclidean
/// norm over all particle components.
inline ResidualParts residual_parts(const SweepWorkspace& ws, const QuadratureRule& rule) {
  ResidualParts r;
  for (int m = 1; m <= rule.M; ++m) {
    const double span = rule.taus[static_cast<std::size_t>(m)] - rule.taus[0];
    double sx = 0.0;
    double sv = 0.0;
    for (std::size_t i = 0; i < ws.N; ++i) {
      Vec3 dx = ws.x0[i] + span * ws.v0[i] - ws.X(m, i);
      Vec3 dv = ws.v0[i] - ws.V(m, i);
      for (int l = 1; l <= rule.M; ++l) {
        dx += rule.QQ(m, l) * ws.F(l, i);
        dv += rule.Q(m, l) * ws.F(l, i);
      }
      sx += dot(dx, dx);
      sv += dot(dv, dv);
    }
    r.x = std::max(r.x, std::sqrt(sx));
    r.v = std::max(r.v, std::sqrt(sv));
  }
  return r;
}

inline double residual_norm(const SweepWorkspace& ws, const QuadratureRule& rule) {
  return residual_parts(ws, rule).combined();
}

struct StateIncrement {
  std::vector<Vec3> dx;
  std::vector<Vec3> dv;
};

/// Increments x_{n+1} - x_0 and v_{n+1} - v_0 of the collocation end update
///   v_{n+1} = v_0 + q F,   x_{n+1} = x_0 + (sum q) v_0 + (q Q) F.
inline StateIncrement collocation_increment(const SweepWorkspace& ws, const QuadratureRule& rule,
                                            bool compensated = false) {
  StateIncrement inc{std::vector<Vec3>(ws.N), std::vector<Vec3>(ws.N)};
  const double qsum = rule.q.sum();
  for (std::size_t i = 0; i < ws.N; ++i) {
    if (compensated) {
      CompensatedVec3Sum sx;
      CompensatedVec3Sum sv;
      sx.add(qsum * ws.v0[i]);
      for (int l = 1; l <= rule.M; ++l) {
        sx.add(rule.qQ(l) * ws.F(l, i));
        sv.add(rule.q(l) * ws.F(l, i));
      }
      inc.dx[i] = sx.value();
      inc.dv[i] = sv.value();
    } else {
      Vec3 dx = qsum * ws.v0[i];
      Vec3 dv;
      for (int l = 1; l <= rule.M; ++l) {
        dx += rule.qQ(l) * ws.F(l, i);
        dv += rule.q(l) * ws.F(l, i);
      }
      inc.dx[i] = dx;
      inc.dv[i] = dv;
    }
  }
  return inc;
}

inline PhaseState collocation_end_update(const SweepWorkspace& ws, const QuadratureRule& rule) {
  const auto inc = collocation_increment(ws, rule);
  PhaseState out{ws.x0, ws.v0};
  for (std::size_t i = 0; i < ws.N; ++i) {
    out.x[i] += inc.dx[i];
    out.v[i] += inc.dv[i];
  }
  return out;
}

/// Node-M values of the current iterate.
inline PhaseState last_node_state(const SweepWorkspace& ws) {
  PhaseState out;
  out.x.assign(ws.X.node(ws.M).begin(), ws.X.node(ws.M).end());
  out.v.assign(ws.V.node(ws.M).begin(), ws.V.node(ws.M).end());
  return out;
}

// --- trajectories --------------------------------------------------------------

struct FixedIterations {
  int iterations = 1;
};

struct ResidualTolerance {
  double tol = 1e-12;
  int max_iterations = 100;
};

using IterationMode = std::variant<FixedIterations, ResidualTolerance>;

enum class Precision { Standard, CompensatedSummation };
enum class Sweeper { BorisSdc, Picard };

/// How the step result is formed from the converged (or truncated) node values.
/// Auto takes the last node when tau_M is the step end (Lobatto) and the
/// collocation end update otherwise.
enum class EndUpdate { Auto, Collocation, LastNode };

struct StepConfig {
  QuadratureRule rule;
  IterationMode mode = FixedIterations{};
  Precision precision = Precision::Standard;
  Sweeper sweeper = Sweeper::BorisSdc;
  EndUpdate end_update = EndUpdate::Auto;
  InitPolicy init = InitPolicy::CopyOnce;

  void validate() const {
    if (const auto* f = std::get_if<FixedIterations>(&mode); f && f->iterations < 1)
      throw ParameterError("fixed iteration count must be >= 1");
    if (const auto* r = std::get_if<ResidualTolerance>(&mode); r && (!(r->tol > 0.0) || r->max_iterations < 1))
      throw ParameterError("residual tolerance must be > 0 with max iterations >= 1");
  }

  [[nodiscard]] bool uses_last_node() const noexcept {
    if (end_update == EndUpdate::LastNode) return true;
    if (end_update == EndUpdate::Collocation) return false;
    return rule.taus.back() == rule.t_right;
  }
};

struct RecordOptions {
  std::size_t stride = 1;  // sample every stride steps (step 0 and the final step always included)
  bool states = true;
  bool energy = true;
  // Track the running max of |H - H0| / |H0| at every step, not only at samples.
  bool envelope = false;
};

struct TrajectorySample {
  std::size_t step = 0;
  double time = 0.0;
  PhaseState state;
  double energy = 0.0;
  double max_energy_error = 0.0;  // running envelope, filled when RecordOptions::envelope is set
  double residual = 0.0;
  int iterations = 0;
  std::size_t rhs_evals = 0;
};

struct TrajectoryRecord {
  std::vector<TrajectorySample> samples;
  PhaseState final_state;
  std::size_t steps_completed = 0;
  std::size_t rhs_evals = 0;
  std::size_t total_iterations = 0;
  std::size_t tolerance_misses = 0;  // steps where max_iterations was hit before tol
  bool diverged = false;
  std::size_t divergence_step = 0;
  std::string divergence_message;
};

namespace detail {

template <ForceModel Model>
double energy_of(const Model& model, const PhaseState& s) {
  if constexpr (HasEnergy<Model>)
    return model.total_energy(s.x, s.v);
  else
    return 0.0;
}

template <ForceModel Model>
void record_sample(TrajectoryRecord& rec, const Model& model, const RecordOptions& opt, std::size_t step, double time,
                   const PhaseState& s, double residual, int iterations, std::size_t rhs_evals) {
  TrajectorySample row;
  row.step = step;
  row.time = time;
  if (opt.states) row.state = s;
  if (opt.energy) row.energy = energy_of(model, s);
  row.residual = residual;
  row.iterations = iterations;
  row.rhs_evals = rhs_evals;
  rec.samples.push_back(std::move(row));
}

/// Running max of the relative energy error, updated every step.
class EnergyEnvelope {
 public:
  template <ForceModel Model>
  EnergyEnvelope(const Model& model, const PhaseState& u0, bool active)
      : active_(active), h0_(active ? energy_of(model, u0) : 0.0) {}

  template <ForceModel Model>
  void update(const Model& model, const PhaseState& s) {
    if (!active_) return;
    const double h = energy_of(model, s);
    const double scale = h0_ != 0.0 ? std::abs(h0_) : 1.0;
    const double e = std::abs(h - h0_) / scale;
    max_ = std::isfinite(e) ? std::max(max_, e) : std::numeric_limits<double>::infinity();
  }
  [[nodiscard]] double max() const noexcept { return max_; }

 private:
  bool active_;
  double h0_;
  double max_ = 0.0;
};

inline bool sample_due(std::size_t step, std::size_t n_steps, std::size_t stride) {
  return step == n_steps || (stride > 0 && step % stride == 0);
}

}  // namespace detail

/// Integrates n_steps SDC (or Picard) steps of size rule.dt() from u0.
/// Divergence stops the run and is reported in the record.
template <ForceModel Model>
TrajectoryRecord run_trajectory(const PhaseState& u0, std::size_t n_steps, const StepConfig& config,
                                const Model& model, const RecordOptions& options = {}) {
  if (n_steps < 1) throw ParameterError("n_steps must be >= 1");
  config.validate();
  detail::require_particles(model, u0);

  const auto& rule = config.rule;
  const double dt = rule.dt();
  const bool compensated = config.precision == Precision::CompensatedSummation;
  const bool last_node = config.uses_last_node();

  TrajectoryRecord rec;
  PhaseState state = u0;
  std::vector<Vec3> carry_x(u0.size()), carry_v(u0.size());
  detail::EnergyEnvelope env(model, u0, options.envelope);
  detail::record_sample(rec, model, options, 0, 0.0, state, 0.0, 0, 0);

  for (std::size_t n = 1; n <= n_steps; ++n) {
    try {
      auto ws = sweep_initialize(state, rule, model, config.init);
      ws.step = n;
      auto sweep = [&] {
        if (config.sweeper == Sweeper::BorisSdc)
          sdc_sweep(ws, rule, model);
        else
          picard_sweep(ws, rule, model);
      };
      double r = 0.0;
      if (const auto* fixed = std::get_if<FixedIterations>(&config.mode)) {
        for (int k = 0; k < fixed->iterations; ++k) sweep();
        r = residual_norm(ws, rule);
      } else {
        const auto& tol = std::get<ResidualTolerance>(config.mode);
        do {
          sweep();
          r = residual_norm(ws, rule);
        } while (r > tol.tol && ws.iterations < tol.max_iterations);
        if (r > tol.tol) ++rec.tolerance_misses;
      }
      if (!std::isfinite(r)) throw DivergenceError("non-finite residual", n);

      if (last_node) {
        for (std::size_t i = 0; i < state.size(); ++i) {
          if (compensated) {
            kahan_add(state.x[i], carry_x[i], ws.DX(ws.M, i));
            kahan_add(state.v[i], carry_v[i], ws.DV(ws.M, i));
          } else {
            state.x[i] = ws.X(ws.M, i);
            state.v[i] = ws.V(ws.M, i);
          }
        }
      } else {
        const auto inc = collocation_increment(ws, rule, compensated);
        for (std::size_t i = 0; i < state.size(); ++i) {
          if (compensated) {
            kahan_add(state.x[i], carry_x[i], inc.dx[i]);
            kahan_add(state.v[i], carry_v[i], inc.dv[i]);
          } else {
            state.x[i] += inc.dx[i];
            state.v[i] += inc.dv[i];
          }
        }
      }
      rec.rhs_evals += ws.rhs_evals;
      rec.total_iterations += static_cast<std::size_t>(ws.iterations);
      rec.steps_completed = n;
      env.update(model, state);
      if (detail::sample_due(n, n_steps, options.stride)) {
        detail::record_sample(rec, model, options, n, static_cast<double>(n) * dt, state, r, ws.iterations,
                              rec.rhs_evals);
        rec.samples.back().max_energy_error = env.max();
      }
    } catch (const DivergenceError& e) {
      rec.diverged = true;
      rec.divergence_step = e.step();
      rec.divergence_message = e.what();
      break;
    }
  }
  rec.final_state = state;
  return rec;
}

/// Classical Boris (or velocity-Verlet with a linear velocity solve) for n_steps of size dt.
template <ForceModel Model>
TrajectoryRecord run_classical(const PhaseState& u0, std::size_t n_steps, double dt, const Model& model,
                               Precision precision = Precision::Standard, const RecordOptions& options = {},
                               VelocitySolve solve = VelocitySolve::BorisRotation) {
  if (n_steps < 1) throw ParameterError("n_steps must be >= 1");
  if (!(dt > 0.0)) throw ParameterError("time step must be positive");
  BorisStepper<Model> stepper(model, u0, solve);
  TrajectoryRecord rec;
  detail::EnergyEnvelope env(model, u0, options.envelope);
  detail::record_sample(rec, model, options, 0, 0.0, stepper.state(), 0.0, 0, stepper.rhs_evals());
  for (std::size_t n = 1; n <= n_steps; ++n) {
    stepper.step(dt, precision == Precision::CompensatedSummation);
    const auto& s = stepper.state();
    bool finite = true;
    for (std::size_t i = 0; i < s.size(); ++i) finite = finite && isfinite(s.x[i]) && isfinite(s.v[i]);
    if (!finite) {
      rec.diverged = true;
      rec.divergence_step = n;
      rec.divergence_message = "non-finite state in classical Boris step (step " + std::to_string(n) + ")";
      break;
    }
    rec.steps_completed = n;
    ++rec.total_iterations;
    env.update(model, s);
    if (detail::sample_due(n, n_steps, options.stride)) {
      detail::record_sample(rec, model, options, n, static_cast<double>(n) * dt, s, 0.0, 1, stepper.rhs_evals());
      rec.samples.back().max_energy_error = env.max();
    }
  }
  rec.final_state = stepper.state();
  rec.rhs_evals = stepper.rhs_evals();
  return rec;
}

}  // namespace borissdc
