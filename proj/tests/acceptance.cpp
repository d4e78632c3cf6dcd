// Acceptance run: one PASS/FAIL line per criterion, indented details below it.
// Exit status is 0 once every criterion has been evaluated and reported;
// a crash or an unexpected exception gives a non-zero status.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"

#include "borissdc/harness.hpp"

using namespace borissdc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  /// Records one sub-check; the criterion passes only if all sub-checks do.
  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    details.push_back(std::string(ok ? "ok   " : "MISS ") + what);
  }
  void note(const std::string& what) { details.push_back("info " + what); }
};

class Report {
 public:
  explicit Report(fs::path file) : file_(std::move(file)) {}

  void run(int id, const std::string& title, const std::function<void(Outcome&)>& body) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream s;
    s << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << ": " << title << " [" << fmt_short(secs) << " s]\n";
    for (const auto& d : o.details) s << "    " << d << '\n';
    std::cout << s.str() << std::flush;
    text_ += s.str();
    passed_ += o.pass;
    ++total_;
  }

  void finish() {
    std::ostringstream s;
    s << "acceptance: " << passed_ << "/" << total_ << " criteria passed\n";
    std::cout << s.str();
    text_ += s.str();
    std::ofstream(file_) << text_;
  }

 private:
  fs::path file_;
  std::string text_;
  int passed_ = 0;
  int total_ = 0;
};

std::string num(double v) { return fmt_short(v); }

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double state_rel(const PhaseState& a, const PhaseState& b) {
  double n = 0.0;
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    n = std::max({n, norm(a.x[i] - b.x[i]), norm(a.v[i] - b.v[i])});
    d = std::max({d, norm(b.x[i]), norm(b.v[i])});
  }
  return n / d;
}

const PhaseState table1_state{{{10.0, 0.0, 0.0}}, {{100.0, 0.0, 100.0}}};

StepConfig fixed(const QuadratureRule& r, int k) {
  StepConfig c{r};
  c.mode = FixedIterations{k};
  return c;
}

std::string slope_of(const LadderResult& r) {
  return r.fit.valid() ? num(r.fit.slope) + " (" + std::to_string(r.fit.points) + " pts)" : "undefined";
}

// --- criteria -----------------------------------------------------------------------

void order_of_convergence(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = default_config(ExperimentKind::Converge);
  using detail::sdc_variant;
  const std::vector<Variant> vars{detail::classical_variant(), sdc_variant(3, 1), sdc_variant(3, 2), sdc_variant(3, 3),
                                  sdc_variant(3, 4), sdc_variant(5, 2), sdc_variant(5, 4)};
  const auto res = experiment_convergence(c, vars, power_ladder(5, 10));
  const double secs = elapsed_since(t0);
  auto s = [&](std::size_t i) { return res[i].fit.valid() ? res[i].fit.slope : std::numeric_limits<double>::quiet_NaN(); };
  o.check(std::abs(s(0) - 2.0) <= 0.1, "classical Boris slope " + slope_of(res[0]) + ", want 2.0 +- 0.1");
  o.check(s(1) >= 1.8, "M=3 K=1 slope " + slope_of(res[1]) + ", want >= 1.8");
  for (std::size_t i = 2; i <= 4; ++i)
    o.check(std::abs(s(i) - 4.0) <= 0.5,
            "M=3 K=" + std::to_string(res[i].variant.iterations) + " slope " + slope_of(res[i]) + ", want 4.0 +- 0.5");
  o.check(std::abs(s(5) - 4.0) <= 0.5, "M=5 K=2 slope " + slope_of(res[5]) + ", want 4.0 +- 0.5");
  o.check(s(6) >= 7.0, "M=5 K=4 slope " + slope_of(res[6]) + ", want >= 7.0");
  o.check(secs <= 60.0, "runtime " + num(secs) + " s, want <= 60 s");
  for (const auto& r : res) {
    std::string errs;
    for (const auto& p : r.points) errs += (errs.empty() ? "" : " ") + num(p.error);
    o.note(r.variant.label() + " errors N=32..1024: " + errs);
  }

  // beyond the criterion: where the asymptotic regime starts on this problem
  auto ext = c;
  const auto boris = experiment_convergence(ext, {detail::classical_variant()}, power_ladder(12, 17));
  o.note("extended ladder N=4096..131072: classical Boris slope " + slope_of(boris[0]));
  const auto high = experiment_convergence(ext, {sdc_variant(3, 2), sdc_variant(5, 2), sdc_variant(5, 4)}, power_ladder(10, 14));
  for (const auto& r : high) o.note("extended ladder N=1024..16384: " + r.variant.label() + " slope " + slope_of(r));
}

void exact_reductions(Outcome& o) {
  const PenningTrap trap{PenningParams{}};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);

  double worst_a = 0.0;
  for (int i = 0; i < 200; ++i) {
    const PhaseState s{{{10 * u(rng), 10 * u(rng), 10 * u(rng)}}, {{100 * u(rng), 100 * u(rng), 100 * u(rng)}}};
    const double dt = 0.001 + 0.05 * (u(rng) + 1.0);
    const auto a = run_trajectory(s, 1, fixed(make_rule(NodeFamily::GaussLobatto, 2, 0.0, dt), 1), trap).final_state;
    worst_a = std::max(worst_a, state_rel(a, classical_boris_step(s, dt, trap)));
  }
  o.check(worst_a <= 1e-14, "(a) M=2 one sweep vs Boris step: max rel " + num(worst_a) + ", want <= 1e-14");

  double worst_b = 0.0;
  for (int m : {3, 4, 5, 7}) {
    for (double dt : {0.01, 0.05, 0.2}) {
      const auto rule = make_rule(NodeFamily::GaussLobatto, m, 0.0, dt);
      auto ws = sweep_initialize(table1_state, rule, trap);
      sdc_sweep(ws, rule, trap);
      PhaseState sub = table1_state;
      for (int n = 1; n <= m; ++n) {
        if (n > 1) sub = classical_boris_step(sub, rule.delta(n), trap);
        worst_b = std::max({worst_b, norm(ws.X(n, 0) - sub.x[0]) / norm(sub.x[0]), norm(ws.V(n, 0) - sub.v[0]) / norm(sub.v[0])});
      }
    }
  }
  o.check(worst_b <= 1e-13, "(b) K=1 on Lobatto nodes vs substepped Boris, every node: max rel " + num(worst_b) + ", want <= 1e-13");

  double worst_c = 0.0;
  for (int m : {3, 5, 7}) {
    const auto rule = make_rule(NodeFamily::GaussLobatto, m, 0.0, 0.02);
    auto ws = sweep_initialize(table1_state, rule, trap);
    double r = residual_norm(ws, rule);
    for (int k = 0; k < 60; ++k) {
      sdc_sweep(ws, rule, trap);
      const double next = residual_norm(ws, rule);
      if (next >= r && k > 3) break;
      r = next;
    }
    worst_c = std::max(worst_c, state_rel(collocation_end_update(ws, rule), last_node_state(ws)));
  }
  o.check(worst_c <= 1e-13, "(c) converged Lobatto end update vs last node: max rel " + num(worst_c) + ", want <= 1e-13");
}

void sweep_matrix_oracle(Outcome& o) {
  const PenningParams p{};
  const PenningTrap trap(p);
  Eigen::VectorXd u0(6);
  u0 << 10, 0, 0, 100, 0, 100;
  auto nodes_vs = [](const SweepWorkspace& ws, const Eigen::VectorXd& u) {
    double n = 0.0;
    double d = 0.0;
    for (int m = 0; m <= ws.M; ++m)
      for (int j = 0; j < 3; ++j) {
        n = std::max({n, std::abs(ws.X(m, 0)[j] - u(6 * m + j)), std::abs(ws.V(m, 0)[j] - u(6 * m + 3 + j))});
        d = std::max({d, std::abs(u(6 * m + j)), std::abs(u(6 * m + 3 + j))});
      }
    return n / d;
  };
  double worst_k = 0.0;
  double worst_coll = 0.0;
  for (auto fam : {NodeFamily::GaussLobatto, NodeFamily::GaussLegendre}) {
    for (int m : {2, 3, 5}) {
      const auto rule = make_rule(fam, m, 0.0, 0.04);
      auto ws = sweep_initialize(table1_state, rule, trap);
      for (int k = 1; k <= 3; ++k) {
        sdc_sweep(ws, rule, trap);
        const auto ops = assemble_operators(p, rule, k);
        worst_k = std::max(worst_k, nodes_vs(ws, ops.P_sdc_k * ops.T_P * u0));
      }
      double r = residual_norm(ws, rule);
      for (int k = 0; k < 60; ++k) {
        sdc_sweep(ws, rule, trap);
        const double next = residual_norm(ws, rule);
        if (next >= r && k > 3) break;
        r = next;
      }
      const auto ops = assemble_operators(p, rule, 0);
      const Eigen::MatrixXd A = ops.M_coll;
      const Eigen::VectorXd dense = A.partialPivLu().solve(ops.C_coll * ops.T_P * u0);
      worst_coll = std::max(worst_coll, nodes_vs(ws, dense));
    }
  }
  o.check(worst_k <= 1e-12, "sweeps k=1..3, M=2,3,5 vs dense P_sdc^k: max rel " + num(worst_k) + ", want <= 1e-12");
  o.check(worst_coll <= 1e-10, "converged sweeps vs dense collocation solve: max rel " + num(worst_coll) + ", want <= 1e-10");
}

void stability_maps(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  MapGrid g;
  g.e_points = 101;
  g.b_points = 101;
  MapOptions opt;
  opt.threads = resolve_threads(0);

  opt.method = MapMethod::ClassicalBoris;
  const auto boris = stability_map(g, opt);
  std::size_t right = 0;
  std::size_t right_stable = 0;
  for (const auto& pt : boris.points)
    if (pt.e > 2.05) {
      ++right;
      right_stable += pt.numerical_stable;
    }
  o.check(right_stable == 0, "classical Boris stable at " + std::to_string(right_stable) + "/" + std::to_string(right) +
                                 " points with eps omega_E dt > 2.05, want 0");

  for (int m : {3, 5}) {
    opt.M = m;
    opt.method = MapMethod::Collocation;
    const auto coll = stability_map(g, opt);
    std::size_t extra = 0;
    for (const auto& pt : coll.points) extra += pt.physical_stable && !pt.numerical_stable;
    o.check(extra == 0, "collocation M=" + std::to_string(m) + ": " + std::to_string(extra) +
                            " unstable points outside the physical mask, want 0");
    opt.method = MapMethod::BorisSdc;
    opt.tol = 1e-12;
    opt.K_max = 100;
    const auto sdc = stability_map(g, opt);
    o.check(sdc.count_stable() >= boris.count_stable(),
            "Boris-SDC M=" + std::to_string(m) + " stable points " + std::to_string(sdc.count_stable()) +
                " vs classical Boris " + std::to_string(boris.count_stable()) + ", want >=");
  }
  const double secs = elapsed_since(t0);
  o.check(secs <= 300.0, "runtime " + num(secs) + " s, want <= 300 s");
}

void convergence_maps(Outcome& o) {
  MapGrid g;
  g.e_points = 101;
  g.b_points = 101;
  MapOptions opt;
  opt.threads = resolve_threads(0);
  for (int m : {3, 5}) {
    opt.M = m;
    // the whole grid shrunk toward dt = 0 in halvings; the radius must fall with it
    std::string trail;
    double prev = std::numeric_limits<double>::infinity();
    bool monotone = true;
    double last = 0.0;
    for (int k = 0; k <= 8; ++k) {
      MapGrid s = g;
      const double f = std::ldexp(1.0, -k);
      s.e_min *= f;
      s.e_max *= f;
      s.b_max *= f;
      s.e_points = s.b_points = 41;
      const auto r = convergence_map(s, opt);
      double worst = 0.0;
      for (const auto& pt : r.points) worst = std::max(worst, pt.value);
      monotone = monotone && worst <= prev;
      trail += (trail.empty() ? "" : " ") + num(worst);
      prev = worst;
      last = worst;
    }
    o.check(monotone && last <= 0.05, "M=" + std::to_string(m) + " max rho(K) on the grid scaled by 2^-k, k=0..8: " + trail +
                                          "; want decreasing and <= 0.05 at the smallest scale");
  }
  opt.M = 5;
  const auto full = convergence_map(g, opt);
  double worst20 = 0.0;
  std::size_t above = 0;
  for (const auto& pt : full.points)
    if (pt.b >= 20.0) {
      worst20 = std::max(worst20, pt.value);
      above += pt.value > 1.0;
    }
  o.check(above > 0, "M=5: " + std::to_string(above) + " points with omega_B dt >= 20 have rho(K) > 1 (max " + num(worst20) +
                         "), want >= 1");
}

void residual_control(Outcome& o) {
  const auto c = default_config(ExperimentKind::Residual);
  const auto res = experiment_convergence(c, default_variants(c), default_ladder(ExperimentKind::Residual));
  for (const auto& r : res) {
    const double tol = r.variant.effective_tol();
    const double e = saturation_level(r);
    o.check(e >= tol / 10.0 && e <= tol * 10.0,
            "M=5 tol " + num(tol) + ": error at finest dt " + num(e) + ", want within one order of tol");
  }
}

void energy_behaviour(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = default_config(ExperimentKind::Energy);
  const auto runs = experiment_energy(c, default_variants(c));
  const double secs = elapsed_since(t0);
  const auto& boris = runs[0];
  const auto& k4 = runs[1];
  const auto& k8 = runs[2];
  o.note(std::to_string(c.energy.steps) + " steps, dt " + num(c.energy.dt) + ", compensated summation");
  o.check(!boris.drift.drift, "classical Boris drift slope " + num(boris.drift.slope) + " per step, want |slope| < 1e-14");
  o.check(!k8.drift.drift, "M=3 K=8 drift slope " + num(k8.drift.slope) + " per step, want |slope| < 1e-14");
  o.check(k4.drift.drift && k4.drift.slope > 0.0, "M=3 K=4 drift slope " + num(k4.drift.slope) + " per step, want > 0");
  const double ratio = boris.max_error / k8.max_error;
  o.check(ratio >= 1e3, "max energy error Boris " + num(boris.max_error) + " / K=8 " + num(k8.max_error) + " = " + num(ratio) +
                            ", want >= 1e3");
  o.check(secs <= 600.0, "runtime " + num(secs) + " s, want <= 600 s");
}

void energy_diagnostic_points(Outcome& o) {
  const auto unit = collocation_matrices(NodeFamily::GaussLobatto, 3, 1.0);
  const std::vector<std::pair<double, double>> good{{-1, 2}, {-1, 5}, {-1, 10}, {-1, 20}, {-0.5, 10},
                                                    {-0.5, 5}, {0.5, 5}, {1, 20}, {1.5, 5}, {1, 10}};
  const std::vector<std::pair<double, double>> bad{{3, 0.5}, {3.9, 2}, {3.9, 5}, {3.9, 10}, {3.5, 1}};
  double worst_good = 0.0;
  std::size_t good_convergent = 0;
  for (auto [e, b] : good) {
    const auto ops = assemble_operators(map_params(e, b), unit, 0);
    good_convergent += spectral_radius(restrict_to(ops.K_sdc, PhaseSubspace::Full)) < 1.0;
    worst_good = std::max(worst_good, energy_diagnostic(map_params(e, b), unit, 1e-12).max_diag);
  }
  double least_bad = std::numeric_limits<double>::infinity();
  std::size_t bad_divergent = 0;
  for (auto [e, b] : bad) {
    const auto ops = assemble_operators(map_params(e, b), unit, 0);
    bad_divergent += spectral_radius(restrict_to(ops.K_sdc, PhaseSubspace::Full)) >= 1.0;
    least_bad = std::min(least_bad, energy_diagnostic(map_params(e, b), unit, 1e-12).max_diag);
  }
  o.check(good_convergent == good.size(), std::to_string(good_convergent) + "/10 sample points have rho(K) < 1");
  o.check(worst_good <= 1e-8, "convergent points: max |H^_ii| " + num(worst_good) + ", want <= 1e-8");
  o.check(bad_divergent == bad.size(), std::to_string(bad_divergent) + "/5 sample points have rho(K) >= 1");
  o.check(least_bad >= 0.1, "divergent points: min of max |H^_ii| " + num(least_bad) + ", want >= 1e-1");
  const auto zero = energy_diagnostic(map_params(-1.0, 25.0), collocation_matrices(NodeFamily::GaussLobatto, 3, 0.0), 1e-12);
  o.check(zero.max_diag == 0.0, "dt = 0: max |H^_ii| = " + num(zero.max_diag) + ", want exactly 0");
}

Vec3 cramer_oracle(const Vec3& v_old, double dt, double alpha, const Vec3& e, const Vec3& b_old, const Vec3& b_new,
                   const Vec3& c) {
  const double h = 0.5 * alpha * dt;
  const double a[3][3] = {{1.0, -h * b_new.z, h * b_new.y}, {h * b_new.z, 1.0, -h * b_new.x}, {-h * b_new.y, h * b_new.x, 1.0}};
  const Vec3 rhs = v_old + dt * (alpha * e + c) + h * cross(v_old, b_old);
  auto det3 = [](const double m[3][3]) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  };
  const double d = det3(a);
  Vec3 out;
  for (int col = 0; col < 3; ++col) {
    double m[3][3];
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) m[r][k] = (k == col) ? rhs[r] : a[r][k];
    out[col] = det3(m) / d;
  }
  return out;
}

void kernel_properties(Outcome& o) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst_rot = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const Vec3 v{u(rng), u(rng), u(rng)};
    const Vec3 t{5 * u(rng), 5 * u(rng), 5 * u(rng)};
    worst_rot = std::max(worst_rot, std::abs(norm(rotate(v, t)) - norm(v)) / norm(v));
  }
  o.check(worst_rot <= 1e-14, "rotation speed change on 1e4 inputs: max rel " + num(worst_rot) + ", want <= 1e-14");
  double worst_const = 0.0;
  double worst_var = 0.0;
  auto rel = [](const Vec3& a, const Vec3& b) { return norm(a - b) / norm(b); };
  for (int i = 0; i < 1000; ++i) {
    const Vec3 v{u(rng), u(rng), u(rng)};
    const Vec3 e{u(rng), u(rng), u(rng)};
    const Vec3 c{u(rng), u(rng), u(rng)};
    const Vec3 b{2 * u(rng), 2 * u(rng), 2 * u(rng)};
    const Vec3 b2{2 * u(rng), 2 * u(rng), 2 * u(rng)};
    const double dt = 0.5 * (u(rng) + 1.0);
    const double alpha = 1.0 + 0.5 * u(rng);
    worst_const = std::max(worst_const, rel(boris_velocity_update(v, dt, alpha, e, b, b, c), cramer_oracle(v, dt, alpha, e, b, b, c)));
    worst_var = std::max(worst_var, rel(boris_velocity_update(v, dt, alpha, e, b, b2, c), cramer_oracle(v, dt, alpha, e, b, b2, c)));
  }
  o.check(worst_const <= 1e-13, "velocity update vs 3x3 implicit solve, constant B: max rel " + num(worst_const) + ", want <= 1e-13");
  o.check(worst_var <= 1e-13, "velocity update vs 3x3 implicit solve, varying B: max rel " + num(worst_var) + ", want <= 1e-13");
}

void quadrature_exactness(Outcome& o) {
  // Q rows near tau = 0 integrate tiny values out of O(1) terms, so the error
  // is measured relative to the sum of |terms| (the dot product's own scale)
  double worst_Q = 0.0;
  double worst_Q_pointwise = 0.0;
  double worst_q = 0.0;
  for (int m : {2, 3, 5, 7}) {
    const auto r = make_rule(NodeFamily::GaussLobatto, m, 0.0, 1.0);
    auto tau = [&](int j) { return r.taus[static_cast<std::size_t>(j)]; };
    for (int d = 0; d <= m - 1; ++d)
      for (int row = 1; row <= m; ++row) {
        double s = 0.0;
        double scale = 0.0;
        for (int j = 1; j <= m; ++j) {
          s += r.Q(row, j) * std::pow(tau(j), d);
          scale += std::abs(r.Q(row, j) * std::pow(tau(j), d));
        }
        const double exact = std::pow(tau(row), d + 1) / (d + 1);
        if (scale > 0.0) worst_Q = std::max(worst_Q, std::abs(s - exact) / scale);
        if (exact != 0.0) worst_Q_pointwise = std::max(worst_Q_pointwise, std::abs(s - exact) / exact);
      }
    for (int d = 0; d <= 2 * m - 3; ++d) {
      double s = 0.0;
      for (int j = 1; j <= m; ++j) s += r.q(j) * std::pow(tau(j), d);
      worst_q = std::max(worst_q, std::abs(s - 1.0 / (d + 1)) * (d + 1));
    }
  }
  o.check(worst_Q <= 1e-12, "Q on monomials of degree <= M-1, M=2,3,5,7: max rel " + num(worst_Q) + ", want <= 1e-12");
  o.note("Q error relative to the integral itself: max " + num(worst_Q_pointwise));
  o.check(worst_q <= 1e-12, "q on monomials of degree <= 2M-3, M=2,3,5,7: max rel " + num(worst_q) + ", want <= 1e-12");

  // dt = 1/2 keeps every closed-form entry a power of two
  const auto r = make_rule(NodeFamily::GaussLobatto, 2, 0.0, 0.5);
  const bool exact = r.Q(2, 1) == 0.25 && r.Q(2, 2) == 0.25 && r.Sx(2, 1) == 0.125 && r.Sx(2, 2) == 0.0 &&
                     r.SQ(2, 1) == 0.0625 && r.SQ(2, 2) == 0.0625 && r.q(1) == 0.25 && r.q(2) == 0.25 &&
                     r.S(2, 1) == 0.25 && r.S(2, 2) == 0.25 && r.Q.row(1).isZero(0.0) && r.S.row(1).isZero(0.0) &&
                     r.Sx.row(1).isZero(0.0) && r.SQ.row(1).isZero(0.0);
  o.check(exact, "M=2 Lobatto matrices equal the closed forms Q=S=[0 0; h/2 h/2], Sx=[0 0; h^2/2 0], SQ=[0 0; h^2/4 h^2/4]");
}

void cloud(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = default_config(ExperimentKind::Cloud);
  const auto vars = default_variants(c);
  const auto res = experiment_cloud(c, vars, default_ladder(ExperimentKind::Cloud));
  const double secs = elapsed_since(t0);
  o.note(std::to_string(c.cloud.particles) + " particles, seed " + std::to_string(c.seed) + ", ensemble hash " +
         hex64(res.initial_hash) + ", reference " + std::to_string(res.reference_steps) + " steps");
  bool same = true;
  for (auto h : res.run_hashes) same = same && h == res.initial_hash;
  o.check(same, "every run started from the same ensemble");

  for (const auto& r : res.ladders) {
    const auto& v = r.variant;
    const double s = r.fit.valid() ? r.fit.slope : std::numeric_limits<double>::quiet_NaN();
    bool ok = false;
    std::string want;
    if (v.method == Method::Boris) {
      ok = std::abs(s - 2.0) <= 0.7;
      want = "2.0 +- 0.7";
    } else if (v.M == 3 && v.iterations == 1) {
      ok = s >= 1.8 - 0.7;
      want = ">= 1.1";
    } else if (v.M == 5 && v.iterations == 4) {
      ok = s >= 7.0 - 0.7;
      want = ">= 6.3";
    } else {
      ok = std::abs(s - 4.0) <= 0.7;
      want = "4.0 +- 0.7";
    }
    o.check(ok, "centre-of-mass slope " + v.label() + " " + slope_of(r) + ", want " + want);
  }
  if (res.energy.size() < 2) {
    o.check(false, "energy runs missing");
    return;
  }
  const auto& b = res.energy[0];
  const auto& s = res.energy[1];
  auto onset = [](const CloudEnergyRun& r) { return r.onset_step ? std::to_string(*r.onset_step) : std::string("none"); };
  const bool later = b.onset_step && (!s.onset_step || *s.onset_step > *b.onset_step);
  o.check(later, "energy drift onset (|H - H_relaxed| / H_relaxed > " + num(c.cloud.onset_threshold) + ", dt " +
                     num(c.cloud.energy_dt) + "): Boris step " + onset(b) + ", " + s.variant.label() + " step " + onset(s) +
                     ", want strictly later");
  o.check(secs <= 600.0, "runtime " + num(secs) + " s, want <= 600 s");
}

void determinism(Outcome& o, const std::string& cli, const fs::path& work) {
  if (cli.empty()) {
    o.check(false, "no --cli binary given");
    return;
  }
  fs::remove_all(work / "det");
  fs::create_directories(work / "det");
  {
    std::ofstream f(work / "det" / "cloud.json");
    f << R"({ "cloud": { "particles": 6, "relaxation": 64, "energy_steps": 2048, "energy_stride": 64, "ref_factor": 4 } })";
  }
  const std::vector<std::string> runs{"converge", "work-precision --steps 2048",
                                      "cloud --steps 256 --config " + (work / "det" / "cloud.json").string(),
                                      "energy --steps 20000", "map-stability --method boris-sdc --M 5"};
  for (int pass = 1; pass <= 2; ++pass) {
    for (const auto& r : runs) {
      const std::string cmd = "\"" + cli + "\" " + r + " --out \"" + (work / "det" / ("run" + std::to_string(pass))).string() +
                              "\" > /dev/null";
      const int rc = std::system(cmd.c_str());
      if (rc != 0) {
        o.check(false, "command failed (" + std::to_string(rc) + "): " + cmd);
        return;
      }
    }
  }
  std::size_t files = 0;
  std::size_t identical = 0;
  for (const auto& e : fs::directory_iterator(work / "det" / "run1")) {
    if (e.path().extension() != ".csv") continue;
    ++files;
    auto slurp = [](const fs::path& p) {
      std::ifstream in(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(in), {});
    };
    const auto other = work / "det" / "run2" / e.path().filename();
    identical += fs::exists(other) && slurp(e.path()) == slurp(other);
  }
  o.check(files >= 10 && identical == files,
          std::to_string(identical) + "/" + std::to_string(files) + " CSV files bit-identical across two CLI runs");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string cli;
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--cli", cli, "boris-sdc binary used for the determinism check");
  app.add_option("--work", work, "scratch directory");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(work);
  Report rep(fs::path(work) / "acceptance_report.txt");
  auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  if (want(1)) rep.run(1, "order of convergence on the reference ladder", order_of_convergence);
  if (want(2)) rep.run(2, "exact reductions to classical Boris", exact_reductions);
  if (want(3)) rep.run(3, "sweeps against dense operators", sweep_matrix_oracle);
  if (want(4)) rep.run(4, "stability maps", stability_maps);
  if (want(5)) rep.run(5, "convergence map", convergence_maps);
  if (want(6)) rep.run(6, "residual control", residual_control);
  if (want(7)) rep.run(7, "long-run energy behaviour", energy_behaviour);
  if (want(8)) rep.run(8, "energy diagnostic of the converged map", energy_diagnostic_points);
  if (want(9)) rep.run(9, "Boris kernel properties", kernel_properties);
  if (want(10)) rep.run(10, "quadrature exactness", quadrature_exactness);
  if (want(11)) rep.run(11, "particle cloud", cloud);
  if (want(12)) rep.run(12, "determinism of the CLI", [&](Outcome& o) { determinism(o, cli, work); });
  rep.finish();
  return 0;
}
