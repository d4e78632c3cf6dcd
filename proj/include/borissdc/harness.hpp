#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "borissdc/boris_kernel.hpp"
#include "borissdc/errors.hpp"
#include "borissdc/fields.hpp"
#include "borissdc/integrators.hpp"
#include "borissdc/linear_analysis.hpp"
#include "borissdc/quadrature.hpp"

namespace borissdc {

// --- configuration -------------------------------------------------------------

enum class ExperimentKind { Converge, Residual, WorkPrecision, Energy, Cloud, MapStability, MapConvergence, MapEnergy };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Converge: return "converge";
    case ExperimentKind::Residual: return "residual";
    case ExperimentKind::WorkPrecision: return "work-precision";
    case ExperimentKind::Energy: return "energy";
    case ExperimentKind::Cloud: return "cloud";
    case ExperimentKind::MapStability: return "map-stability";
    case ExperimentKind::MapConvergence: return "map-convergence";
    case ExperimentKind::MapEnergy: return "map-energy";
  }
  return "?";
}

inline ExperimentKind parse_experiment(const std::string& s) {
  for (auto k : {ExperimentKind::Converge, ExperimentKind::Residual, ExperimentKind::WorkPrecision, ExperimentKind::Energy,
                 ExperimentKind::Cloud, ExperimentKind::MapStability, ExperimentKind::MapConvergence,
                 ExperimentKind::MapEnergy})
    if (to_string(k) == s) return k;
  throw ParameterError("experiment: unknown kind '" + s + "'");
}

enum class Method { Boris, Verlet, BorisSdc, Picard, Collocation };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Boris: return "boris";
    case Method::Verlet: return "verlet";
    case Method::BorisSdc: return "boris-sdc";
    case Method::Picard: return "picard";
    case Method::Collocation: return "collocation";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (auto m : {Method::Boris, Method::Verlet, Method::BorisSdc, Method::Picard, Method::Collocation})
    if (to_string(m) == s) return m;
  throw ParameterError("method: unknown value '" + s + "' (boris, verlet, boris-sdc, picard, collocation)");
}

inline NodeFamily parse_nodes(const std::string& s) {
  if (s == "lobatto") return NodeFamily::GaussLobatto;
  if (s == "legendre") return NodeFamily::GaussLegendre;
  throw ParameterError("nodes: unknown value '" + s + "' (lobatto, legendre)");
}

inline std::string nodes_name(NodeFamily f) { return f == NodeFamily::GaussLobatto ? "lobatto" : "legendre"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "std") return Precision::Standard;
  if (s == "compensated") return Precision::CompensatedSummation;
  throw ParameterError("precision: unknown value '" + s + "' (std, compensated)");
}

inline std::string precision_name(Precision p) { return p == Precision::Standard ? "std" : "compensated"; }

/// One integrator setup. Classical methods are stored as their M=2, K=1 equivalent.
struct Variant {
  Method method = Method::BorisSdc;
  int M = 3;
  NodeFamily nodes = NodeFamily::GaussLobatto;
  int iterations = 2;
  double tol = 0.0;  // > 0 selects residual-controlled sweeps
  int k_max = 100;
  Precision precision = Precision::Standard;

  [[nodiscard]] bool classical() const noexcept { return method == Method::Boris || method == Method::Verlet; }
  [[nodiscard]] bool residual_mode() const noexcept { return method == Method::Collocation || tol > 0.0; }
  /// Tolerance actually used in residual mode.
  [[nodiscard]] double effective_tol() const noexcept { return tol > 0.0 ? tol : 1e-13; }

  void validate() const {
    if (classical()) return;
    if (M < 1 || M > 32) throw ParameterError("M: node count must be in [1, 32]");
    if (!residual_mode() && iterations < 1) throw ParameterError("iterations: must be >= 1");
    if (tol < 0.0 || !std::isfinite(tol)) throw ParameterError("tol: must be finite and >= 0");
    if (k_max < 1) throw ParameterError("k_max: must be >= 1");
  }

  [[nodiscard]] Variant normalized() const {
    Variant v = *this;
    if (v.classical()) {
      v.M = 2;
      v.nodes = NodeFamily::GaussLobatto;
      v.iterations = 1;
      v.tol = 0.0;
    }
    return v;
  }

  /// "boris-sdc_M3_K2", "boris-sdc_M5_tol1e-10", "boris_M2_K1"
  [[nodiscard]] std::string label() const {
    const Variant v = normalized();
    std::string s = to_string(v.method) + "_M" + std::to_string(v.M);
    if (v.residual_mode()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%g", v.effective_tol());
      s += std::string("_tol") + buf;
    } else {
      s += "_K" + std::to_string(v.iterations);
    }
    if (v.nodes == NodeFamily::GaussLegendre) s += "_legendre";
    return s;
  }
};

struct EnergySettings {
  std::size_t steps = 1'000'000;
  double dt = 1.0 / 64.0;
  std::size_t samples = 1000;
  double no_drift_slope = 1e-14;  // |slope| per step below this counts as no drift
};

struct CloudSettings {
  std::size_t particles = 20;
  double lambda = 0.01;
  double x_shift = 1e-3;
  double v_shift = 5.0;
  std::size_t relaxation = 2560;
  std::size_t energy_steps = 262'144;
  double energy_dt = 1.0 / 64.0;
  std::size_t energy_stride = 256;
  double onset_threshold = 1e-2;
  int ref_M = 5;
  double ref_tol = 1e-12;
  int ref_factor = 100;
  bool analytic_reference = false;  // the centre of mass obeys the single-particle equations
  std::vector<Variant> energy_variants;
};

struct MapSettings {
  MapGrid grid;
  MapOptions options;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Converge;
  PenningParams params;
  Vec3 x0{10.0, 0.0, 0.0};
  Vec3 v0{100.0, 0.0, 100.0};
  double t_end = 16.0;
  std::vector<std::size_t> steps;  // time-step ladder; empty = kind default
  Variant method;                  // primary variant
  std::vector<Variant> variants;   // empty = kind default (or the primary variant)
  std::vector<double> tolerances{1e-2, 1e-6, 1e-10};
  std::uint64_t seed = 20190;
  std::string output = "out";
  unsigned threads = 0;  // 0 = all cores
  bool paper_scale = false;
  EnergySettings energy;
  CloudSettings cloud;
  MapSettings map;

  void validate() const;
};

inline std::vector<std::size_t> power_ladder(int lo, int hi) {
  std::vector<std::size_t> out;
  for (int p = lo; p <= hi; ++p) out.push_back(std::size_t{1} << p);
  return out;
}

namespace detail {

inline Variant classical_variant(Method m = Method::Boris) {
  Variant v;
  v.method = m;
  return v.normalized();
}

inline Variant sdc_variant(int m, int k, Precision p = Precision::Standard) {
  Variant v;
  v.M = m;
  v.iterations = k;
  v.precision = p;
  return v;
}

inline Variant tol_variant(int m, double tol) {
  Variant v;
  v.M = m;
  v.tol = tol;
  return v;
}

}  // namespace detail

/// Ladder used when the config gives none.
inline std::vector<std::size_t> default_ladder(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Residual: return power_ladder(7, 12);
    case ExperimentKind::WorkPrecision: return power_ladder(5, 16);
    default: return power_ladder(5, 10);
  }
}

/// Variants compared when the config gives none.
inline std::vector<Variant> default_variants(const ExperimentConfig& c) {
  using detail::classical_variant;
  using detail::sdc_variant;
  switch (c.kind) {
    case ExperimentKind::Residual: {
      std::vector<Variant> out;
      for (double t : c.tolerances) {
        Variant v = c.method;
        if (v.classical()) v.method = Method::BorisSdc;
        v.tol = t;
        out.push_back(v);
      }
      return out;
    }
    case ExperimentKind::WorkPrecision:
    case ExperimentKind::Cloud:
      return {classical_variant(), sdc_variant(3, 1), sdc_variant(3, 2), sdc_variant(3, 4), sdc_variant(5, 2),
              sdc_variant(5, 4)};
    case ExperimentKind::Energy: {
      const Precision p = Precision::CompensatedSummation;
      Variant b = classical_variant();
      b.precision = p;
      return {b, sdc_variant(3, 4, p), sdc_variant(3, 8, p)};
    }
    default: return {c.method.normalized()};
  }
}

inline std::vector<Variant> default_cloud_energy_variants() {
  Variant b = detail::classical_variant();
  b.precision = Precision::CompensatedSummation;
  return {b, detail::sdc_variant(3, 2, Precision::CompensatedSummation)};
}

/// Defaults for one experiment kind; config files and flags are applied on top.
inline ExperimentConfig default_config(ExperimentKind k) {
  ExperimentConfig c;
  c.kind = k;
  if (k == ExperimentKind::Residual) c.method = detail::tol_variant(5, 1e-10);
  if (k == ExperimentKind::Energy) c.method.precision = Precision::CompensatedSummation;
  return c;
}

inline void ExperimentConfig::validate() const {
  params.validate();
  if (!(t_end > 0.0) || !std::isfinite(t_end)) throw ParameterError("t_end: must be positive");
  for (auto n : steps)
    if (n < 1) throw ParameterError("steps: every ladder entry must be >= 1");
  method.validate();
  for (const auto& v : variants) v.validate();
  for (double t : tolerances)
    if (!(t > 0.0)) throw ParameterError("tolerances: entries must be positive");
  if (energy.steps < 1 || !(energy.dt > 0.0) || energy.samples < 1)
    throw ParameterError("energy: steps, dt and samples must be positive");
  if (cloud.particles < 1) throw ParameterError("cloud.particles: must be >= 1");
  if (cloud.particles > 1 && !(cloud.lambda > 0.0)) throw ParameterError("cloud.lambda: must be positive");
  if (cloud.x_shift < 0.0 || cloud.v_shift < 0.0) throw ParameterError("cloud: shifts must be non-negative");
  if (cloud.ref_factor < 1 || cloud.ref_M < 1 || !(cloud.ref_tol > 0.0))
    throw ParameterError("cloud: reference settings must be positive");
  if (cloud.energy_steps < 1 || !(cloud.energy_dt > 0.0) || cloud.energy_stride < 1)
    throw ParameterError("cloud: energy run settings must be positive");
  for (const auto& v : cloud.energy_variants) v.validate();
  map.grid.validate();
  if (map.options.M < 1) throw ParameterError("map.M: must be >= 1");
  if (!(map.options.tol > 0.0) || map.options.K_max < 1) throw ParameterError("map: tol and k_max must be positive");
}

// --- JSON ----------------------------------------------------------------------

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ParameterError(where + ": expected an object");
  for (const auto& [k, _] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw ParameterError(where + (where.empty() ? "" : ".") + k + ": unknown key");
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParameterError(where + (where.empty() ? "" : ".") + key + ": wrong type");
  }
}

inline Vec3 get_vec(const json& j, const char* key, const std::string& where, Vec3 fallback) {
  const auto a = get<std::vector<double>>(j, key, where, {fallback.x, fallback.y, fallback.z});
  if (a.size() != 3) throw ParameterError(where + "." + key + ": expected three numbers");
  return {a[0], a[1], a[2]};
}

inline Variant variant_from_json(const json& j, const std::string& where, Variant v = {}) {
  reject_unknown(j, where, {"name", "M", "nodes", "iterations", "tol", "k_max", "precision"});
  if (j.contains("name")) v.method = parse_method(get<std::string>(j, "name", where, ""));
  v.M = get<int>(j, "M", where, v.M);
  if (j.contains("nodes")) v.nodes = parse_nodes(get<std::string>(j, "nodes", where, ""));
  v.iterations = get<int>(j, "iterations", where, v.iterations);
  v.tol = get<double>(j, "tol", where, v.tol);
  v.k_max = get<int>(j, "k_max", where, v.k_max);
  if (j.contains("precision")) v.precision = parse_precision(get<std::string>(j, "precision", where, ""));
  return v;
}

inline json variant_to_json(const Variant& v) {
  return {{"name", to_string(v.method)}, {"M", v.M},       {"nodes", nodes_name(v.nodes)},
          {"iterations", v.iterations},  {"tol", v.tol},   {"k_max", v.k_max},
          {"precision", precision_name(v.precision)}};
}

inline PhaseSubspace parse_subspace(const std::string& s) {
  if (s == "transverse") return PhaseSubspace::Transverse;
  if (s == "full") return PhaseSubspace::Full;
  throw ParameterError("map.subspace: unknown value '" + s + "' (transverse, full)");
}

inline MapMethod parse_map_method(const std::string& s) {
  for (auto m : {MapMethod::ClassicalBoris, MapMethod::Collocation, MapMethod::BorisSdc})
    if (to_string(m) == s) return m;
  throw ParameterError("map.method: unknown value '" + s + "' (boris, collocation, boris-sdc)");
}

}  // namespace detail

/// Reads a config; missing keys keep their defaults, unknown keys are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig c = {}) {
  using detail::get;
  detail::reject_unknown(j, "", {"experiment", "trap", "initial", "t_end", "steps", "method", "variants", "tolerances",
                                  "seed", "output", "threads", "paper_scale", "energy", "cloud", "map"});
  if (j.contains("experiment")) c.kind = parse_experiment(get<std::string>(j, "experiment", "", ""));
  if (j.contains("trap")) {
    const auto& t = j["trap"];
    detail::reject_unknown(t, "trap", {"alpha", "omega_E", "omega_B", "epsilon"});
    c.params.alpha = get<double>(t, "alpha", "trap", c.params.alpha);
    c.params.omega_E = get<double>(t, "omega_E", "trap", c.params.omega_E);
    c.params.omega_B = get<double>(t, "omega_B", "trap", c.params.omega_B);
    c.params.epsilon = get<int>(t, "epsilon", "trap", c.params.epsilon);
  }
  if (j.contains("initial")) {
    const auto& t = j["initial"];
    detail::reject_unknown(t, "initial", {"x", "v"});
    c.x0 = detail::get_vec(t, "x", "initial", c.x0);
    c.v0 = detail::get_vec(t, "v", "initial", c.v0);
  }
  c.t_end = get<double>(j, "t_end", "", c.t_end);
  c.steps = get<std::vector<std::size_t>>(j, "steps", "", c.steps);
  if (j.contains("method")) c.method = detail::variant_from_json(j["method"], "method", c.method);
  if (j.contains("variants")) {
    if (!j["variants"].is_array()) throw ParameterError("variants: expected an array");
    c.variants.clear();
    for (std::size_t i = 0; i < j["variants"].size(); ++i)
      c.variants.push_back(detail::variant_from_json(j["variants"][i], "variants[" + std::to_string(i) + "]"));
  }
  c.tolerances = get<std::vector<double>>(j, "tolerances", "", c.tolerances);
  c.seed = get<std::uint64_t>(j, "seed", "", c.seed);
  c.output = get<std::string>(j, "output", "", c.output);
  c.threads = get<unsigned>(j, "threads", "", c.threads);
  c.paper_scale = get<bool>(j, "paper_scale", "", c.paper_scale);
  if (j.contains("energy")) {
    const auto& e = j["energy"];
    detail::reject_unknown(e, "energy", {"steps", "dt", "samples", "no_drift_slope"});
    c.energy.steps = get<std::size_t>(e, "steps", "energy", c.energy.steps);
    c.energy.dt = get<double>(e, "dt", "energy", c.energy.dt);
    c.energy.samples = get<std::size_t>(e, "samples", "energy", c.energy.samples);
    c.energy.no_drift_slope = get<double>(e, "no_drift_slope", "energy", c.energy.no_drift_slope);
  }
  if (j.contains("cloud")) {
    const auto& e = j["cloud"];
    detail::reject_unknown(e, "cloud",
                           {"particles", "lambda", "x_shift", "v_shift", "relaxation", "energy_steps", "energy_dt",
                            "energy_stride", "onset_threshold", "ref_M", "ref_tol", "ref_factor", "analytic_reference",
                            "energy_variants"});
    auto& s = c.cloud;
    s.particles = get<std::size_t>(e, "particles", "cloud", s.particles);
    s.lambda = get<double>(e, "lambda", "cloud", s.lambda);
    s.x_shift = get<double>(e, "x_shift", "cloud", s.x_shift);
    s.v_shift = get<double>(e, "v_shift", "cloud", s.v_shift);
    s.relaxation = get<std::size_t>(e, "relaxation", "cloud", s.relaxation);
    s.energy_steps = get<std::size_t>(e, "energy_steps", "cloud", s.energy_steps);
    s.energy_dt = get<double>(e, "energy_dt", "cloud", s.energy_dt);
    s.energy_stride = get<std::size_t>(e, "energy_stride", "cloud", s.energy_stride);
    s.onset_threshold = get<double>(e, "onset_threshold", "cloud", s.onset_threshold);
    s.ref_M = get<int>(e, "ref_M", "cloud", s.ref_M);
    s.ref_tol = get<double>(e, "ref_tol", "cloud", s.ref_tol);
    s.ref_factor = get<int>(e, "ref_factor", "cloud", s.ref_factor);
    s.analytic_reference = get<bool>(e, "analytic_reference", "cloud", s.analytic_reference);
    if (e.contains("energy_variants")) {
      s.energy_variants.clear();
      for (std::size_t i = 0; i < e["energy_variants"].size(); ++i)
        s.energy_variants.push_back(
            detail::variant_from_json(e["energy_variants"][i], "cloud.energy_variants[" + std::to_string(i) + "]"));
    }
  }
  if (j.contains("map")) {
    const auto& m = j["map"];
    detail::reject_unknown(m, "map", {"method", "M", "nodes", "tol", "k_max", "subspace", "grid"});
    auto& o = c.map.options;
    if (m.contains("method")) o.method = detail::parse_map_method(get<std::string>(m, "method", "map", ""));
    o.M = get<int>(m, "M", "map", o.M);
    if (m.contains("nodes")) o.family = parse_nodes(get<std::string>(m, "nodes", "map", ""));
    o.tol = get<double>(m, "tol", "map", o.tol);
    o.K_max = get<int>(m, "k_max", "map", o.K_max);
    if (m.contains("subspace")) o.subspace = detail::parse_subspace(get<std::string>(m, "subspace", "map", ""));
    if (m.contains("grid")) {
      const auto& g = m["grid"];
      detail::reject_unknown(g, "map.grid", {"e_min", "e_max", "e_points", "b_min", "b_max", "b_points"});
      auto& gr = c.map.grid;
      gr.e_min = get<double>(g, "e_min", "map.grid", gr.e_min);
      gr.e_max = get<double>(g, "e_max", "map.grid", gr.e_max);
      gr.e_points = get<int>(g, "e_points", "map.grid", gr.e_points);
      gr.b_min = get<double>(g, "b_min", "map.grid", gr.b_min);
      gr.b_max = get<double>(g, "b_max", "map.grid", gr.b_max);
      gr.b_points = get<int>(g, "b_points", "map.grid", gr.b_points);
    }
  }
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : c.variants) variants.push_back(detail::variant_to_json(v));
  nlohmann::json cloud_variants = nlohmann::json::array();
  for (const auto& v : c.cloud.energy_variants) cloud_variants.push_back(detail::variant_to_json(v));
  const auto& o = c.map.options;
  const auto& g = c.map.grid;
  return {
      {"experiment", to_string(c.kind)},
      {"trap", {{"alpha", c.params.alpha}, {"omega_E", c.params.omega_E}, {"omega_B", c.params.omega_B}, {"epsilon", c.params.epsilon}}},
      {"initial", {{"x", {c.x0.x, c.x0.y, c.x0.z}}, {"v", {c.v0.x, c.v0.y, c.v0.z}}}},
      {"t_end", c.t_end},
      {"steps", c.steps},
      {"method", detail::variant_to_json(c.method)},
      {"variants", variants},
      {"tolerances", c.tolerances},
      {"seed", c.seed},
      {"output", c.output},
      {"threads", c.threads},
      {"paper_scale", c.paper_scale},
      {"energy", {{"steps", c.energy.steps}, {"dt", c.energy.dt}, {"samples", c.energy.samples}, {"no_drift_slope", c.energy.no_drift_slope}}},
      {"cloud",
       {{"particles", c.cloud.particles}, {"lambda", c.cloud.lambda}, {"x_shift", c.cloud.x_shift},
        {"v_shift", c.cloud.v_shift}, {"relaxation", c.cloud.relaxation}, {"energy_steps", c.cloud.energy_steps},
        {"energy_dt", c.cloud.energy_dt}, {"energy_stride", c.cloud.energy_stride},
        {"onset_threshold", c.cloud.onset_threshold}, {"ref_M", c.cloud.ref_M}, {"ref_tol", c.cloud.ref_tol},
        {"ref_factor", c.cloud.ref_factor}, {"analytic_reference", c.cloud.analytic_reference},
        {"energy_variants", cloud_variants}}},
      {"map",
       {{"method", to_string(o.method)}, {"M", o.M}, {"nodes", nodes_name(o.family)}, {"tol", o.tol}, {"k_max", o.K_max},
        {"subspace", o.subspace == PhaseSubspace::Transverse ? "transverse" : "full"},
        {"grid", {{"e_min", g.e_min}, {"e_max", g.e_max}, {"e_points", g.e_points}, {"b_min", g.b_min}, {"b_max", g.b_max}, {"b_points", g.b_points}}}}},
  };
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParameterError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j, std::move(base));
}

/// Switches to the paper's 16M-step long-run settings (energy and cloud energy).
inline void apply_paper_scale(ExperimentConfig& c) {
  c.paper_scale = true;
  c.energy.steps = 16'777'216;
  c.energy.dt = 262'144.0 / 16'777'216.0;
  c.energy.samples = 4096;
  c.cloud.particles = 100;
  c.cloud.energy_steps = 16'777'216;
  c.cloud.energy_dt = c.energy.dt;
  c.cloud.energy_stride = 4096;
}

// --- utilities -----------------------------------------------------------------

/// Doubles in [0, 1) from the top 53 bits of a 64-bit Mersenne twister.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  /// Uniform in the closed ball of the given radius (rejection from the cube).
  Vec3 in_ball(double radius) {
    for (;;) {
      const Vec3 p{uniform(-1.0, 1.0), uniform(-1.0, 1.0), uniform(-1.0, 1.0)};
      if (dot(p, p) <= 1.0) return radius * p;
    }
  }

 private:
  std::mt19937_64 gen_;
};

/// 64-bit FNV-1a over the raw bytes of positions then velocities.
inline std::uint64_t state_hash(const PhaseState& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](double d) {
    unsigned char b[sizeof(double)];
    std::memcpy(b, &d, sizeof d);
    for (unsigned char c : b) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& x : s.x) feed(x.x), feed(x.y), feed(x.z);
  for (const auto& v : s.v) feed(v.x), feed(v.y), feed(v.z);
  return h;
}

inline std::string hex64(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

/// Plain comma-separated table; values are written as given.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) {
    if (row.size() != header.size()) throw ParameterError("csv row width does not match the header");
    rows.push_back(std::move(row));
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
      out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    if (!out) throw IoError("write failed for '" + path.string() + "'");
  }
};

struct SlopeFit {
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
  std::size_t points = 0;
  [[nodiscard]] bool valid() const noexcept { return points >= 2 && std::isfinite(slope); }
};

/// Least-squares line through (x, y).
inline SlopeFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  SlopeFit f;
  f.points = x.size();
  if (x.size() < 2 || x.size() != y.size()) return f;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0.0) return f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  return f;
}

inline unsigned resolve_threads(unsigned requested) {
  unsigned n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("BORIS_SDC_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min(n, static_cast<unsigned>(cap));
  }
  return std::max(1u, n);
}

/// Runs fn(i) for i in [0, count) on up to `threads` workers.
template <class Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const unsigned n = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), std::max<std::size_t>(count, 1)));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
}

// --- running one variant ---------------------------------------------------------

/// Integrates u0 over n_steps of size dt with the given variant.
template <ForceModel Model>
TrajectoryRecord run_variant(const Variant& variant, const Model& model, const PhaseState& u0, std::size_t n_steps,
                             double dt, const RecordOptions& record = {}) {
  const Variant v = variant.normalized();
  v.validate();
  if (v.classical())
    return run_classical(u0, n_steps, dt, model, v.precision, record,
                         v.method == Method::Verlet ? VelocitySolve::LinearSolve : VelocitySolve::BorisRotation);
  StepConfig cfg;
  cfg.rule = make_rule(v.nodes, v.M, 0.0, dt);
  cfg.precision = v.precision;
  cfg.sweeper = v.method == Method::Picard ? Sweeper::Picard : Sweeper::BorisSdc;
  if (v.residual_mode())
    cfg.mode = ResidualTolerance{v.effective_tol(), v.k_max};
  else
    cfg.mode = FixedIterations{v.iterations};
  return run_trajectory(u0, n_steps, cfg, model, record);
}

inline PhaseState single_state(const ExperimentConfig& c) { return {{c.x0}, {c.v0}}; }

/// |x - x_ref| / |x_ref| in the x coordinate.
inline double relative_x_error(double x, double x_ref) { return std::abs(x - x_ref) / std::abs(x_ref); }

// --- time-step ladders ------------------------------------------------------------

struct LadderPoint {
  std::size_t n_steps = 0;
  double dt = 0.0;
  double error = 0.0;
  std::size_t rhs_evals = 0;
  double mean_iterations = 0.0;
  bool diverged = false;
  bool saturated = false;
  [[nodiscard]] bool used_in_fit() const noexcept { return !diverged && !saturated; }
};

struct LadderResult {
  Variant variant;
  std::vector<LadderPoint> points;
  SlopeFit fit;  // log(error) against log(dt)
};

/// Fit exclusion rules: a run counts as diverged when its state became
/// non-finite or its relative error is >= 1 (no correct digit); a point is
/// saturated when its error is below the round-off floor.
struct FitRules {
  double diverged_error = 1.0;
  double saturation_floor = 1e-12;
};

inline SlopeFit fit_ladder(std::vector<LadderPoint>& pts, const FitRules& rules = {}) {
  std::vector<double> lx;
  std::vector<double> ly;
  for (auto& p : pts) {
    if (!std::isfinite(p.error) || p.error >= rules.diverged_error) p.diverged = true;
    p.saturated = !p.diverged && p.error < rules.saturation_floor;
    if (p.used_in_fit()) {
      lx.push_back(std::log(p.dt));
      ly.push_back(std::log(p.error));
    }
  }
  return fit_line(lx, ly);
}

/// Runs every (variant, N) pair; the error functional maps a final state to the relative error.
template <ForceModel Model, class ErrorFn>
std::vector<LadderResult> run_ladders(const std::vector<Variant>& variants, const std::vector<std::size_t>& ladder,
                                      double t_end, const Model& model, const PhaseState& u0, ErrorFn&& error_of,
                                      unsigned threads, const FitRules& rules = {}) {
  std::vector<LadderResult> out(variants.size());
  for (std::size_t i = 0; i < variants.size(); ++i) {
    out[i].variant = variants[i].normalized();
    out[i].points.resize(ladder.size());
  }
  RecordOptions rec;
  rec.stride = 0;
  rec.states = false;
  rec.energy = false;
  parallel_for(variants.size() * ladder.size(), threads, [&](std::size_t job) {
    const std::size_t vi = job / ladder.size();
    const std::size_t li = job % ladder.size();
    LadderPoint& p = out[vi].points[li];
    p.n_steps = ladder[li];
    p.dt = t_end / static_cast<double>(p.n_steps);
    const auto r = run_variant(variants[vi], model, u0, p.n_steps, p.dt, rec);
    p.rhs_evals = r.rhs_evals;
    p.mean_iterations = static_cast<double>(r.total_iterations) / static_cast<double>(std::max<std::size_t>(r.steps_completed, 1));
    p.diverged = r.diverged;
    p.error = r.diverged ? std::numeric_limits<double>::infinity() : error_of(r.final_state);
  });
  for (auto& l : out) l.fit = fit_ladder(l.points, rules);
  return out;
}

inline CsvTable ladder_table(const std::vector<LadderResult>& results, std::uint64_t seed) {
  CsvTable t;
  t.header = {"method", "M", "K", "tol", "nodes", "n_steps", "dt", "rel_error", "rhs_evals", "mean_iterations",
              "diverged", "used_in_fit", "seed"};
  for (const auto& r : results) {
    const auto& v = r.variant;
    for (const auto& p : r.points)
      t.add({to_string(v.method), std::to_string(v.M), v.residual_mode() ? "" : std::to_string(v.iterations),
             v.residual_mode() ? fmt(v.effective_tol()) : "", nodes_name(v.nodes), std::to_string(p.n_steps), fmt(p.dt),
             fmt(p.error), std::to_string(p.rhs_evals), fmt(p.mean_iterations), p.diverged ? "1" : "0",
             p.used_in_fit() ? "1" : "0", std::to_string(seed)});
  }
  return t;
}

inline CsvTable ladder_summary_table(const std::vector<LadderResult>& results, std::uint64_t seed) {
  CsvTable t;
  t.header = {"method", "M", "K", "tol", "nodes", "slope", "fit_points", "finest_error", "seed"};
  for (const auto& r : results) {
    const auto& v = r.variant;
    t.add({to_string(v.method), std::to_string(v.M), v.residual_mode() ? "" : std::to_string(v.iterations),
           v.residual_mode() ? fmt(v.effective_tol()) : "", nodes_name(v.nodes), fmt(r.fit.slope),
           std::to_string(r.fit.points), fmt(r.points.empty() ? 0.0 : r.points.back().error), std::to_string(seed)});
  }
  return t;
}

/// Single-particle ladders against the analytic solution at t_end.
inline std::vector<LadderResult> experiment_convergence(const ExperimentConfig& c, const std::vector<Variant>& variants,
                                                        const std::vector<std::size_t>& ladder) {
  const PenningTrap trap(c.params);
  const double x_ref = analytic_solution(c.params, c.x0, c.v0, c.t_end).first.x;
  return run_ladders(variants, ladder, c.t_end, trap, single_state(c),
                     [&](const PhaseState& s) { return relative_x_error(s.x[0].x, x_ref); }, resolve_threads(c.threads));
}

/// Error reached at the finest step of a ladder, the saturation level in residual mode.
inline double saturation_level(const LadderResult& r) {
  return r.points.empty() ? std::numeric_limits<double>::quiet_NaN() : r.points.back().error;
}

/// Cheapest run (fewest rhs evaluations) of a ladder reaching the target error; nullopt if none does.
inline std::optional<std::size_t> cost_to_reach(const LadderResult& r, double target) {
  std::optional<std::size_t> best;
  for (const auto& p : r.points)
    if (!p.diverged && p.error <= target && (!best || p.rhs_evals < *best)) best = p.rhs_evals;
  return best;
}

inline CsvTable work_precision_table(const std::vector<LadderResult>& results, const std::vector<double>& targets,
                                     std::uint64_t seed) {
  CsvTable t;
  t.header = {"target_error", "method", "M", "K", "tol", "rhs_evals", "cheapest", "seed"};
  for (double target : targets) {
    std::optional<std::size_t> best;
    for (const auto& r : results)
      if (auto c = cost_to_reach(r, target); c && (!best || *c < *best)) best = c;
    for (const auto& r : results) {
      const auto c = cost_to_reach(r, target);
      const auto& v = r.variant;
      t.add({fmt(target), to_string(v.method), std::to_string(v.M),
             v.residual_mode() ? "" : std::to_string(v.iterations), v.residual_mode() ? fmt(v.effective_tol()) : "",
             c ? std::to_string(*c) : "", c && best && *c == *best ? "1" : "0", std::to_string(seed)});
    }
  }
  return t;
}

// --- energy --------------------------------------------------------------------

struct DriftFit {
  double slope = std::numeric_limits<double>::quiet_NaN();  // per step
  bool drift = true;
};

/// Least-squares slope of the running-max relative energy error over the
/// second half of the run; no drift when |slope| < threshold.
inline DriftFit drift_test(const std::vector<std::size_t>& steps, const std::vector<double>& envelope, double threshold) {
  DriftFit d;
  if (steps.empty() || steps.size() != envelope.size()) return d;
  const double half = static_cast<double>(steps.back()) / 2.0;
  std::vector<double> x;
  std::vector<double> y;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (static_cast<double>(steps[i]) >= half) {
      x.push_back(static_cast<double>(steps[i]));
      y.push_back(envelope[i]);
    }
  }
  const auto f = fit_line(x, y);
  if (!f.valid()) return d;
  d.slope = f.slope;
  d.drift = !(std::abs(f.slope) < threshold);
  return d;
}

struct EnergyRun {
  Variant variant;
  TrajectoryRecord record;
  double max_error = 0.0;
  DriftFit drift;
};

inline EnergyRun energy_run(const Variant& v, const PenningTrap& model, const PhaseState& u0, std::size_t steps, double dt,
                            std::size_t stride, double no_drift_slope) {
  RecordOptions rec;
  rec.stride = std::max<std::size_t>(stride, 1);
  rec.states = false;
  rec.energy = true;
  rec.envelope = true;
  EnergyRun out;
  out.variant = v.normalized();
  out.record = run_variant(v, model, u0, steps, dt, rec);
  std::vector<std::size_t> st;
  std::vector<double> env;
  for (const auto& s : out.record.samples) {
    st.push_back(s.step);
    env.push_back(s.max_energy_error);
  }
  out.max_error = env.empty() ? 0.0 : env.back();
  out.drift = drift_test(st, env, no_drift_slope);
  return out;
}

inline CsvTable energy_table(const EnergyRun& r, double dt) {
  CsvTable t;
  t.header = {"step", "time", "energy", "rel_energy_error", "max_rel_energy_error", "residual", "iterations", "rhs_evals"};
  const double h0 = r.record.samples.empty() ? 0.0 : r.record.samples.front().energy;
  for (const auto& s : r.record.samples)
    t.add({std::to_string(s.step), fmt(static_cast<double>(s.step) * dt), fmt(s.energy),
           fmt(std::abs(s.energy - h0) / std::abs(h0)), fmt(s.max_energy_error), fmt(s.residual),
           std::to_string(s.iterations), std::to_string(s.rhs_evals)});
  return t;
}

/// Long single-particle runs; returns one EnergyRun per variant.
inline std::vector<EnergyRun> experiment_energy(const ExperimentConfig& c, const std::vector<Variant>& variants) {
  const PenningTrap trap(c.params);
  const std::size_t stride = std::max<std::size_t>(1, c.energy.steps / c.energy.samples);
  std::vector<EnergyRun> out(variants.size());
  parallel_for(variants.size(), resolve_threads(c.threads), [&](std::size_t i) {
    out[i] = energy_run(variants[i], trap, single_state(c), c.energy.steps, c.energy.dt, stride, c.energy.no_drift_slope);
  });
  return out;
}

// --- particle cloud ----------------------------------------------------------------

/// Table 1 particle replicated N times with uniform-in-ball distortions drawn from the seed.
inline ParticleEnsemble make_cloud(const ExperimentConfig& c) {
  ParticleEnsemble e;
  e.lambda = c.cloud.lambda;
  Rng rng(c.seed);
  for (std::size_t i = 0; i < c.cloud.particles; ++i) {
    e.x.push_back(c.x0 + rng.in_ball(c.cloud.x_shift));
    e.v.push_back(c.v0 + rng.in_ball(c.cloud.v_shift));
    e.charge.push_back(c.params.alpha);
    e.mass.push_back(1.0);
  }
  return e;
}

struct CloudEnergyRun {
  Variant variant;
  TrajectoryRecord record;    // post-relaxation part, energies relative to its first sample
  double reference_energy = 0.0;
  std::optional<std::size_t> onset_step;  // counted from the start of the run, relaxation included
  bool diverged = false;
};

struct CloudResult {
  std::uint64_t initial_hash = 0;
  std::vector<std::uint64_t> run_hashes;  // hash of the ensemble each run started from
  double reference_x_cm = 0.0;
  std::size_t reference_steps = 0;
  std::vector<LadderResult> ladders;
  std::vector<CloudEnergyRun> energy;
};

inline CloudEnergyRun cloud_energy_run(const Variant& v, const PenningTrap& trap, const PhaseState& u0,
                                       const CloudSettings& s) {
  CloudEnergyRun out;
  out.variant = v.normalized();
  PhaseState start = u0;
  RecordOptions quiet;
  quiet.stride = 0;
  quiet.energy = false;
  if (s.relaxation > 0) {
    const auto relax = run_variant(v, trap, u0, s.relaxation, s.energy_dt, quiet);
    if (relax.diverged) {
      out.diverged = true;
      return out;
    }
    start = relax.final_state;
  }
  RecordOptions rec;
  rec.stride = s.energy_stride;
  rec.states = false;
  rec.envelope = true;
  out.record = run_variant(v, trap, start, s.energy_steps, s.energy_dt, rec);
  out.diverged = out.record.diverged;
  out.reference_energy = out.record.samples.empty() ? 0.0 : out.record.samples.front().energy;
  for (const auto& smp : out.record.samples) {
    if (smp.max_energy_error > s.onset_threshold) {
      out.onset_step = s.relaxation + smp.step;
      break;
    }
  }
  if (out.diverged && !out.onset_step) out.onset_step = s.relaxation + out.record.divergence_step;
  return out;
}

/// Centre-of-mass ladders against a fine reference plus post-relaxation energy runs.
inline CloudResult experiment_cloud(const ExperimentConfig& c, const std::vector<Variant>& variants,
                                    const std::vector<std::size_t>& ladder, bool with_energy = true) {
  const auto ens = make_cloud(c);
  const PenningTrap trap(c.params, ens);
  const PhaseState u0 = ens.state();
  CloudResult res;
  res.initial_hash = state_hash(u0);
  const unsigned threads = resolve_threads(c.threads);

  auto x_cm = [&](const PhaseState& s) { return center_of_mass(s.x, trap.masses()).x; };
  if (c.cloud.analytic_reference) {
    const Vec3 x0 = center_of_mass(u0.x, trap.masses());
    const Vec3 v0 = center_of_mass(u0.v, trap.masses());
    res.reference_x_cm = analytic_solution(c.params, x0, v0, c.t_end).first.x;
  } else {
    const std::size_t n_max = *std::max_element(ladder.begin(), ladder.end());
    res.reference_steps = n_max * static_cast<std::size_t>(c.cloud.ref_factor);
    Variant ref;
    ref.M = c.cloud.ref_M;
    ref.tol = c.cloud.ref_tol;
    RecordOptions quiet;
    quiet.stride = 0;
    quiet.states = false;
    quiet.energy = false;
    const auto r = run_variant(ref, trap, u0, res.reference_steps, c.t_end / static_cast<double>(res.reference_steps), quiet);
    if (r.diverged) throw DivergenceError("cloud reference run diverged", r.divergence_step);
    res.reference_x_cm = x_cm(r.final_state);
  }

  res.ladders = run_ladders(variants, ladder, c.t_end, trap, u0,
                            [&](const PhaseState& s) { return relative_x_error(x_cm(s), res.reference_x_cm); }, threads);
  for (std::size_t i = 0; i < variants.size(); ++i) res.run_hashes.push_back(state_hash(u0));

  if (with_energy) {
    auto ev = c.cloud.energy_variants.empty() ? default_cloud_energy_variants() : c.cloud.energy_variants;
    res.energy.resize(ev.size());
    parallel_for(ev.size(), threads, [&](std::size_t i) { res.energy[i] = cloud_energy_run(ev[i], trap, u0, c.cloud); });
    for (std::size_t i = 0; i < ev.size(); ++i) res.run_hashes.push_back(state_hash(u0));
  }
  return res;
}

inline CsvTable cloud_energy_table(const CloudEnergyRun& r, const CloudSettings& s) {
  CsvTable t;
  t.header = {"step", "time", "energy", "energy_ratio", "max_rel_energy_error", "rhs_evals"};
  for (const auto& smp : r.record.samples) {
    const std::size_t step = s.relaxation + smp.step;
    t.add({std::to_string(step), fmt(static_cast<double>(step) * s.energy_dt), fmt(smp.energy),
           fmt(smp.energy / r.reference_energy), fmt(smp.max_energy_error), std::to_string(smp.rhs_evals)});
  }
  return t;
}

// --- maps ----------------------------------------------------------------------

inline MapResult experiment_map(const ExperimentConfig& c) {
  MapOptions o = c.map.options;
  o.threads = resolve_threads(c.threads);
  switch (c.kind) {
    case ExperimentKind::MapConvergence: return convergence_map(c.map.grid, o);
    case ExperimentKind::MapEnergy: return energy_map(c.map.grid, o);
    default: return stability_map(c.map.grid, o);
  }
}

inline CsvTable map_table(const MapResult& r) {
  CsvTable t;
  t.header = {"eps_omegaE_dt", "omegaB_dt", "value", "physical_stable", "numerical_stable", "status"};
  for (const auto& p : r.points)
    t.add({fmt(p.e), fmt(p.b), fmt(p.value), p.physical_stable ? "1" : "0", p.numerical_stable ? "1" : "0", p.status});
  return t;
}

// --- output naming --------------------------------------------------------------

/// "<kind>_<method>_M<M>_<K..|tol..>_seed<seed>.csv"
inline std::string output_name(const std::string& kind, const Variant& v, std::uint64_t seed,
                               const std::string& suffix = "") {
  return kind + "_" + v.label() + (suffix.empty() ? "" : "_" + suffix) + "_seed" + std::to_string(seed) + ".csv";
}

/// Maps embed the method and its K/tol: classical Boris is K1, collocation is an exact solve.
inline std::string map_output_name(const ExperimentConfig& c) {
  const auto& o = c.map.options;
  std::string s = to_string(c.kind) + "_";
  if (c.kind == ExperimentKind::MapStability && o.method == MapMethod::ClassicalBoris)
    s += "boris_M2_K1";
  else if (c.kind == ExperimentKind::MapStability && o.method == MapMethod::Collocation)
    s += "collocation_M" + std::to_string(o.M) + "_exact";
  else if (c.kind == ExperimentKind::MapConvergence)
    s += "boris-sdc_M" + std::to_string(o.M) + "_K1";
  else
    s += "boris-sdc_M" + std::to_string(o.M) + "_tol" + fmt_short(o.tol);
  return s + "_seed" + std::to_string(c.seed) + ".csv";
}

// --- self-test ------------------------------------------------------------------

struct SelfTestCase {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Quick invariant checks across the modules.
inline std::vector<SelfTestCase> selftest() {
  std::vector<SelfTestCase> out;
  auto check = [&](const std::string& name, auto&& fn) {
    SelfTestCase c{name, false, ""};
    try {
      const auto [ok, detail] = fn();
      c.passed = ok;
      c.detail = detail;
    } catch (const std::exception& e) {
      c.detail = std::string("exception: ") + e.what();
    }
    out.push_back(c);
  };

  check("lobatto Q exact on monomials", [] {
    double worst = 0.0;
    for (int m : {2, 3, 5, 7}) {
      const auto r = make_rule(NodeFamily::GaussLobatto, m, 0.0, 1.0);
      for (int d = 0; d <= m - 1; ++d)
        for (int row = 1; row <= m; ++row) {
          double s = 0.0;
          for (int j = 1; j <= m; ++j) s += r.Q(row, j) * std::pow(r.taus[static_cast<std::size_t>(j)], d);
          const double exact = std::pow(r.taus[static_cast<std::size_t>(row)], d + 1) / (d + 1);
          worst = std::max(worst, std::abs(s - exact));
        }
    }
    return std::pair{worst <= 1e-12, "max deviation " + fmt_short(worst)};
  });

  check("lobatto q exact to degree 2M-3", [] {
    double worst = 0.0;
    for (int m : {2, 3, 5, 7}) {
      const auto r = make_rule(NodeFamily::GaussLobatto, m, 0.0, 1.0);
      for (int d = 0; d <= 2 * m - 3; ++d) {
        double s = 0.0;
        for (int j = 1; j <= m; ++j) s += r.q(j) * std::pow(r.taus[static_cast<std::size_t>(j)], d);
        worst = std::max(worst, std::abs(s - 1.0 / (d + 1)) * (d + 1));
      }
    }
    return std::pair{worst <= 1e-12, "max relative deviation " + fmt_short(worst)};
  });

  check("boris rotation preserves speed", [] {
    Rng rng(7);
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
      const Vec3 v{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const Vec3 t{rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10)};
      worst = std::max(worst, std::abs(norm(rotate(v, t)) - norm(v)) / norm(v));
    }
    return std::pair{worst <= 1e-14, "max relative change " + fmt_short(worst)};
  });

  check("two-node sweep equals classical Boris", [] {
    const PenningTrap trap{PenningParams{}};
    const PhaseState u{{{10, 0, 0}}, {{100, 0, 100}}};
    const double dt = 0.01;
    StepConfig cfg;
    cfg.rule = make_rule(NodeFamily::GaussLobatto, 2, 0.0, dt);
    cfg.mode = FixedIterations{1};
    const auto a = run_trajectory(u, 1, cfg, trap).final_state;
    const auto b = classical_boris_step(u, dt, trap);
    const double d = std::max(norm(a.x[0] - b.x[0]) / norm(b.x[0]), norm(a.v[0] - b.v[0]) / norm(b.v[0]));
    return std::pair{d <= 1e-14, "relative difference " + fmt_short(d)};
  });

  check("one sweep equals substepped Boris", [] {
    const PenningTrap trap{PenningParams{}};
    const PhaseState u{{{10, 0, 0}}, {{100, 0, 100}}};
    const double dt = 0.05;
    StepConfig cfg;
    cfg.rule = make_rule(NodeFamily::GaussLobatto, 5, 0.0, dt);
    cfg.mode = FixedIterations{1};
    const auto a = run_trajectory(u, 1, cfg, trap).final_state;
    PhaseState b = u;
    for (int m = 2; m <= 5; ++m) b = classical_boris_step(b, cfg.rule.delta(m), trap);
    const double d = std::max(norm(a.x[0] - b.x[0]) / norm(b.x[0]), norm(a.v[0] - b.v[0]) / norm(b.v[0]));
    return std::pair{d <= 1e-13, "relative difference " + fmt_short(d)};
  });

  check("sweeps match the dense iteration", [] {
    const PenningParams p{};
    const PenningTrap trap(p);
    const double dt = 0.02;
    const auto rule = make_rule(NodeFamily::GaussLobatto, 3, 0.0, dt);
    const auto ops = assemble_operators(p, rule, 3);
    const PhaseState u{{{10, 0, 0}}, {{100, 0, 100}}};
    StepConfig cfg;
    cfg.rule = rule;
    cfg.mode = FixedIterations{3};
    const auto a = run_trajectory(u, 1, cfg, trap).final_state;
    Eigen::Matrix<double, 6, 1> u0;
    u0 << 10, 0, 0, 100, 0, 100;
    const Eigen::Matrix<double, 6, 1> b = ops.P_sdc_tilde * u0;
    double num = 0.0;
    for (int j = 0; j < 3; ++j) num = std::max({num, std::abs(a.x[0][j] - b(j)), std::abs(a.v[0][j] - b(3 + j))});
    const double d = num / b.cwiseAbs().maxCoeff();
    return std::pair{d <= 1e-12, "relative difference " + fmt_short(d)};
  });

  check("collocation map stable at a physical point", [] {
    MapGrid g;
    g.e_min = g.e_max = -1.0;
    g.b_min = g.b_max = 5.0;
    g.e_points = g.b_points = 1;
    const auto r = stability_map(g, MapOptions{});
    return std::pair{r.points[0].numerical_stable, "rho " + fmt_short(r.points[0].value)};
  });

  check("energy diagnostic vanishes for a zero step", [] {
    const auto d = energy_diagnostic(PenningParams{}, collocation_matrices(NodeFamily::GaussLobatto, 3, 0.0), 1e-12);
    return std::pair{d.max_diag == 0.0, "max |H^_ii| " + fmt_short(d.max_diag)};
  });

  return out;
}

}  // namespace borissdc
