// Experiment driver: one subcommand per harness experiment plus a self-test.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "borissdc/harness.hpp"

namespace fs = std::filesystem;
using namespace borissdc;

namespace {

struct Overrides {
  std::string config;
  std::string out;
  std::optional<int> M;
  std::optional<int> iterations;
  std::optional<double> tol;
  std::optional<std::size_t> steps;
  std::optional<double> dt;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> nodes;
  std::optional<std::string> precision;
  std::optional<std::string> method;
  bool paper_scale = false;

  [[nodiscard]] bool touches_method() const { return M || iterations || tol || nodes || precision || method; }
};

void add_common(CLI::App& sub, Overrides& o) {
  sub.add_option("--config", o.config, "JSON experiment config");
  sub.add_option("--out", o.out, "output directory");
  sub.add_option("--M", o.M, "number of collocation nodes");
  sub.add_option("--iterations", o.iterations, "fixed number of sweeps K");
  sub.add_option("--tol", o.tol, "residual tolerance (selects residual-controlled sweeps)");
  sub.add_option("--steps", o.steps, "finest step count of the ladder, or step count of an energy run");
  sub.add_option("--dt", o.dt, "finest time step of the ladder, or time step of an energy run");
  sub.add_option("--seed", o.seed, "random seed");
  sub.add_option("--nodes", o.nodes, "node family")->check(CLI::IsMember({"lobatto", "legendre"}));
  sub.add_option("--precision", o.precision, "summation mode")->check(CLI::IsMember({"std", "compensated"}));
  sub.add_option("--method", o.method, "integrator")
      ->check(CLI::IsMember({"boris", "verlet", "boris-sdc", "picard", "collocation"}));
  sub.add_flag("--paper-scale", o.paper_scale, "use the 16M-step long-run preset (slow)");
}

/// Six-level halving ladder ending at n_finest.
std::vector<std::size_t> ladder_ending_at(std::size_t n_finest) {
  if (n_finest < 32) throw ParameterError("steps: finest ladder level must be >= 32");
  std::vector<std::size_t> out;
  for (int i = 5; i >= 0; --i) out.push_back(n_finest >> i);
  return out;
}

bool is_map(ExperimentKind k) {
  return k == ExperimentKind::MapStability || k == ExperimentKind::MapConvergence || k == ExperimentKind::MapEnergy;
}

ExperimentConfig effective_config(ExperimentKind kind, const Overrides& o) {
  ExperimentConfig c = default_config(kind);
  if (!o.config.empty()) c = load_config(o.config, c);
  c.kind = kind;  // the subcommand wins over the file
  if (o.paper_scale) apply_paper_scale(c);
  if (!o.out.empty()) c.output = o.out;
  if (o.seed) c.seed = *o.seed;

  if (is_map(kind)) {
    auto& m = c.map.options;
    if (o.M) m.M = *o.M;
    if (o.tol) m.tol = *o.tol;
    if (o.iterations) m.K_max = *o.iterations;
    if (o.nodes) m.family = parse_nodes(*o.nodes);
    if (o.method) {
      const Method meth = parse_method(*o.method);
      if (meth == Method::Boris) m.method = MapMethod::ClassicalBoris;
      else if (meth == Method::Collocation) m.method = MapMethod::Collocation;
      else if (meth == Method::BorisSdc) m.method = MapMethod::BorisSdc;
      else throw ParameterError("method: maps support boris, collocation and boris-sdc");
    }
    if (o.steps || o.dt || o.precision) throw ParameterError("steps/dt/precision: not used by map experiments");
    return c;
  }

  if (o.touches_method()) {
    Variant& v = c.method;
    if (o.method) v.method = parse_method(*o.method);
    if (o.M) v.M = *o.M;
    if (o.iterations) {
      v.iterations = *o.iterations;
      if (!o.tol) v.tol = 0.0;
    }
    if (o.tol) v.tol = *o.tol;
    if (o.nodes) v.nodes = parse_nodes(*o.nodes);
    if (o.precision) v.precision = parse_precision(*o.precision);
    if (kind == ExperimentKind::Residual && o.tol) c.tolerances = {*o.tol};
    if (kind == ExperimentKind::Cloud) {
      c.variants = {v};
      c.cloud.energy_variants = {v};
    } else if (kind != ExperimentKind::Residual) {
      c.variants = {v};
    }
  }

  if (kind == ExperimentKind::Energy) {
    if (o.steps) c.energy.steps = *o.steps;
    if (o.dt) c.energy.dt = *o.dt;
  } else {
    if (o.steps && o.dt) throw ParameterError("steps/dt: give only one of the two");
    if (o.steps) c.steps = ladder_ending_at(*o.steps);
    if (o.dt) {
      if (!(*o.dt > 0.0)) throw ParameterError("dt: must be positive");
      c.steps = ladder_ending_at(static_cast<std::size_t>(std::llround(c.t_end / *o.dt)));
    }
    if (kind == ExperimentKind::Cloud && o.dt) c.cloud.energy_dt = *o.dt;
  }
  return c;
}

void prepare_output(const ExperimentConfig& c) {
  std::error_code ec;
  fs::create_directories(c.output, ec);
  if (ec || !fs::is_directory(c.output)) throw IoError("cannot create output directory '" + c.output + "'");
  const fs::path p = fs::path(c.output) / "config.json";
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw IoError("cannot write '" + p.string() + "'");
  f << config_to_json(c).dump(2) << '\n';
}

std::string slope_text(const LadderResult& r) {
  return r.variant.label() + " slope " + (r.fit.valid() ? fmt_short(r.fit.slope) : std::string("n/a")) + " (" +
         std::to_string(r.fit.points) + " pts)";
}

std::string join(const std::vector<std::string>& parts) {
  std::string s;
  for (const auto& p : parts) s += (s.empty() ? "" : "; ") + p;
  return s;
}

int run(ExperimentKind kind, const Overrides& o) {
  const ExperimentConfig c = effective_config(kind, o);
  c.validate();
  if (c.paper_scale)
    std::cerr << "warning: paper-scale preset selected; runs take hours and are not part of acceptance\n";
  prepare_output(c);
  const fs::path out(c.output);
  const std::string name = to_string(kind);
  const auto ladder = c.steps.empty() ? default_ladder(kind) : c.steps;
  const auto variants = c.variants.empty() ? default_variants(c) : c.variants;

  switch (kind) {
    case ExperimentKind::Converge:
    case ExperimentKind::Residual:
    case ExperimentKind::WorkPrecision: {
      const auto res = experiment_convergence(c, variants, ladder);
      std::vector<std::string> parts;
      for (const auto& r : res) {
        ladder_table({r}, c.seed).write(out / output_name(name, r.variant, c.seed));
        if (kind == ExperimentKind::Residual)
          parts.push_back(r.variant.label() + " saturated error " + fmt_short(saturation_level(r)));
        else
          parts.push_back(slope_text(r));
      }
      if (kind == ExperimentKind::WorkPrecision) {
        const std::vector<double> targets{1e-2, 1e-4, 1e-6, 1e-8, 1e-10};
        work_precision_table(res, targets, c.seed).write(out / ("work-precision_summary_seed" + std::to_string(c.seed) + ".csv"));
        parts.clear();
        for (double t : {1e-2, 1e-10}) {
          std::string best = "none";
          std::size_t cost = 0;
          for (const auto& r : res)
            if (auto e = cost_to_reach(r, t); e && (best == "none" || *e < cost)) best = r.variant.label(), cost = *e;
          parts.push_back("cheapest at " + fmt_short(t) + ": " + best + (best == "none" ? "" : " (" + std::to_string(cost) + " evals)"));
        }
      } else {
        ladder_summary_table(res, c.seed).write(out / (name + "_summary_seed" + std::to_string(c.seed) + ".csv"));
      }
      std::cout << name << ": " << join(parts) << '\n';
      return 0;
    }
    case ExperimentKind::Energy: {
      const auto runs = experiment_energy(c, variants);
      std::vector<std::string> parts;
      bool diverged = false;
      for (const auto& r : runs) {
        energy_table(r, c.energy.dt).write(out / output_name(name, r.variant, c.seed));
        diverged = diverged || r.record.diverged;
        parts.push_back(r.variant.label() + " max " + fmt_short(r.max_error) + " drift slope " + fmt_short(r.drift.slope) +
                        (r.record.diverged ? " DIVERGED" : ""));
      }
      std::cout << name << ": " << join(parts) << '\n';
      return diverged ? 2 : 0;
    }
    case ExperimentKind::Cloud: {
      const auto res = experiment_cloud(c, variants, ladder);
      std::vector<std::string> parts;
      for (const auto& r : res.ladders) {
        ladder_table({r}, c.seed).write(out / output_name(name, r.variant, c.seed));
        parts.push_back(slope_text(r));
      }
      CsvTable summary;
      summary.header = {"run", "method", "M", "K", "tol", "slope", "onset_step", "initial_hash"};
      std::size_t h = 0;
      for (const auto& r : res.ladders) {
        const auto& v = r.variant;
        summary.add({"ladder", to_string(v.method), std::to_string(v.M), v.residual_mode() ? "" : std::to_string(v.iterations),
                     v.residual_mode() ? fmt(v.effective_tol()) : "", fmt(r.fit.slope), "", hex64(res.run_hashes[h++])});
      }
      for (const auto& e : res.energy) {
        cloud_energy_table(e, c.cloud).write(out / output_name(name, e.variant, c.seed, "energy"));
        const auto& v = e.variant;
        summary.add({"energy", to_string(v.method), std::to_string(v.M), v.residual_mode() ? "" : std::to_string(v.iterations),
                     v.residual_mode() ? fmt(v.effective_tol()) : "", "", e.onset_step ? std::to_string(*e.onset_step) : "",
                     hex64(res.run_hashes[h++])});
        parts.push_back(v.label() + " onset " + (e.onset_step ? std::to_string(*e.onset_step) : std::string("none")));
      }
      summary.write(out / ("cloud_summary_seed" + std::to_string(c.seed) + ".csv"));
      std::cout << name << ": hash " << hex64(res.initial_hash) << "; " << join(parts) << '\n';
      return 0;
    }
    default: {
      const auto res = experiment_map(c);
      map_table(res).write(out / map_output_name(c));
      std::size_t failed = 0;
      for (const auto& p : res.points) failed += p.status != "ok";
      std::cout << name << ": " << res.count_stable() << "/" << res.points.size() << " numerically stable points"
                << (failed ? ", " + std::to_string(failed) + " flagged" : std::string()) << '\n';
      return 0;
    }
  }
}

int run_selftest() {
  const auto cases = selftest();
  std::size_t passed = 0;
  for (const auto& c : cases) {
    passed += c.passed;
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
  }
  std::cout << "selftest: " << passed << "/" << cases.size() << " passed\n";
  return passed == cases.size() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Boris-SDC experiments for the Penning trap"};
  app.require_subcommand(1);
  Overrides o;
  const std::vector<std::pair<ExperimentKind, const char*>> kinds{
      {ExperimentKind::Converge, "order of convergence against the analytic solution"},
      {ExperimentKind::Residual, "error saturation under residual-controlled sweeps"},
      {ExperimentKind::WorkPrecision, "error against right-hand side evaluations"},
      {ExperimentKind::Energy, "long-run energy error and drift"},
      {ExperimentKind::Cloud, "particle cloud: centre-of-mass order and energy onset"},
      {ExperimentKind::MapStability, "spectral radius of the step map"},
      {ExperimentKind::MapConvergence, "spectral radius of the sweep iteration"},
      {ExperimentKind::MapEnergy, "energy diagnostic of the converged map"},
  };
  std::vector<std::pair<ExperimentKind, CLI::App*>> subs;
  for (const auto& [k, help] : kinds) {
    auto* s = app.add_subcommand(to_string(k), help);
    add_common(*s, o);
    subs.emplace_back(k, s);
  }
  auto* self = app.add_subcommand("selftest", "quick invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (self->parsed()) return run_selftest();
    for (const auto& [k, s] : subs)
      if (s->parsed()) return run(k, o);
  } catch (const ParameterError& e) {
    std::cerr << "parameter error: " << e.what() << '\n';
    return 1;
  } catch (const UnsupportedRegimeError& e) {
    std::cerr << "parameter error: " << e.what() << '\n';
    return 1;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
