#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "borissdc/errors.hpp"
#include "borissdc/vec3.hpp"

namespace borissdc {

/// Ideal Penning trap: B = (omega_B / alpha) e_z and a quadrupole E field.
/// epsilon = -1 confines along z.
struct PenningParams {
  double alpha = 1.0;
  double omega_E = 4.9;
  double omega_B = 25.0;
  int epsilon = -1;

  void validate() const {
    if (epsilon != -1 && epsilon != 1) throw ParameterError("epsilon must be -1 or +1");
    if (!(omega_E >= 0.0) || !(omega_B >= 0.0)) throw ParameterError("trap frequencies must be non-negative");
    if (!(alpha != 0.0) || !std::isfinite(alpha)) throw ParameterError("alpha must be finite and non-zero");
  }

  /// omega_B^2 >= -4 epsilon omega_E^2
  [[nodiscard]] bool physically_stable() const noexcept {
    return omega_B * omega_B >= -4.0 * epsilon * omega_E * omega_E;
  }
};

/// Positions and velocities of N particles.
struct PhaseState {
  std::vector<Vec3> x;
  std::vector<Vec3> v;

  [[nodiscard]] std::size_t size() const noexcept { return x.size(); }
};

/// Particles with per-particle charge and mass, interacting through a softened Coulomb field.
struct ParticleEnsemble {
  std::vector<Vec3> x;
  std::vector<Vec3> v;
  std::vector<double> charge;
  std::vector<double> mass;
  double lambda = 0.01;

  [[nodiscard]] std::size_t size() const noexcept { return x.size(); }

  void validate() const {
    const auto n = x.size();
    if (v.size() != n || charge.size() != n || mass.size() != n)
      throw ParameterError("ensemble arrays must all have N entries");
    if (n > 1 && !(lambda > 0.0)) throw ParameterError("Coulomb smoothing length lambda must be positive for N > 1");
  }

  [[nodiscard]] PhaseState state() const { return {x, v}; }

  static ParticleEnsemble single(const Vec3& x0, const Vec3& v0, double charge = 1.0, double mass = 1.0) {
    return {{x0}, {v0}, {charge}, {mass}, 0.01};
  }
};

inline Vec3 e_ext(const PenningParams& p, const Vec3& x) noexcept {
  const double c = -p.epsilon * p.omega_E * p.omega_E / p.alpha;
  return {c * x.x, c * x.y, -2.0 * c * x.z};
}

inline Vec3 b_ext(const PenningParams& p) noexcept { return {0.0, 0.0, p.omega_B / p.alpha}; }

/// External quadrupole potential with e_ext = -grad(phi_ext).
inline double phi_ext(const PenningParams& p, const Vec3& x) noexcept {
  return p.epsilon * p.omega_E * p.omega_E / (2.0 * p.alpha) * (x.x * x.x + x.y * x.y - 2.0 * x.z * x.z);
}

/// Softened Coulomb field at particle i from all others.
inline Vec3 e_int(std::span<const Vec3> x, std::span<const double> charge, double lambda, std::size_t i) noexcept {
  Vec3 e;
  const double l2 = lambda * lambda;
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (k == i) continue;
    const Vec3 d = x[i] - x[k];
    const double r2 = dot(d, d) + l2;
    e += (charge[k] / (r2 * std::sqrt(r2))) * d;
  }
  return e;
}

inline Vec3 e_int(const ParticleEnsemble& ens, std::size_t i) noexcept {
  return e_int(ens.x, ens.charge, ens.lambda, i);
}

/// Acceleration alpha_i [E_ext + E_int + v x B] of particle i moving with velocity v.
inline Vec3 lorentz_force(const PenningParams& p, const ParticleEnsemble& ens, std::size_t i, const Vec3& v) {
  const double alpha_i = ens.charge[i] / ens.mass[i];
  return alpha_i * (e_ext(p, ens.x[i]) + e_int(ens, i) + cross(v, b_ext(p)));
}

inline double total_energy(const PenningParams& p, std::span<const Vec3> x, std::span<const Vec3> v,
                           std::span<const double> charge, std::span<const double> mass, double lambda) {
  double kinetic = 0.0;
  double external = 0.0;
  double interaction = 0.0;
  const double l2 = lambda * lambda;
  for (std::size_t i = 0; i < x.size(); ++i) {
    kinetic += 0.5 * mass[i] * dot(v[i], v[i]);
    external += charge[i] * phi_ext(p, x[i]);
    for (std::size_t k = i + 1; k < x.size(); ++k) {
      const Vec3 d = x[i] - x[k];
      interaction += charge[i] * charge[k] / std::sqrt(dot(d, d) + l2);
    }
  }
  return kinetic + external + interaction;
}

inline double total_energy(const PenningParams& p, const ParticleEnsemble& ens) {
  return total_energy(p, ens.x, ens.v, ens.charge, ens.mass, ens.lambda);
}

inline Vec3 center_of_mass(std::span<const Vec3> x, std::span<const double> mass) {
  Vec3 acc;
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += mass[i] * x[i];
    total += mass[i];
  }
  if (!(total > 0.0)) throw ParameterError("total mass must be positive");
  return acc / total;
}

inline Vec3 center_of_mass(const ParticleEnsemble& ens) { return center_of_mass(ens.x, ens.mass); }

// --- Analytic single-particle reference -------------------------------------

/// Frequencies and amplitudes of the closed-form single-particle orbit.
struct AnalyticCoefficients {
  double omega_tilde = 0.0;
  double Omega_plus = 0.0;
  double Omega_minus = 0.0;
  double R_plus = 0.0;
  double R_minus = 0.0;
  double I_plus = 0.0;
  double I_minus = 0.0;
};

inline AnalyticCoefficients analytic_coefficients(const PenningParams& p, const Vec3& x0, const Vec3& v0) {
  p.validate();
  const double disc = p.omega_B * p.omega_B + 4.0 * p.epsilon * p.omega_E * p.omega_E;
  if (p.epsilon != -1 && p.omega_E > 0.0)
    throw UnsupportedRegimeError("analytic solution requires epsilon = -1 (z motion unbounded otherwise)");
  if (!(disc > 0.0))
    throw UnsupportedRegimeError("analytic solution requires omega_B^2 + 4 epsilon omega_E^2 > 0");

  AnalyticCoefficients c;
  c.omega_tilde = std::sqrt(-2.0 * p.epsilon) * p.omega_E;
  const double root = std::sqrt(disc);
  c.Omega_plus = 0.5 * (p.omega_B + root);
  c.Omega_minus = 0.5 * (p.omega_B - root);
  const double gap = c.Omega_plus - c.Omega_minus;
  c.R_minus = (c.Omega_plus * x0.x + v0.y) / gap;
  c.R_plus = x0.x - c.R_minus;
  c.I_minus = (c.Omega_plus * x0.y - v0.x) / gap;
  c.I_plus = x0.y - c.I_minus;
  return c;
}

/// Exact position and velocity at time t for a single particle (charge-to-mass = p.alpha).
inline std::pair<Vec3, Vec3> analytic_solution(const PenningParams& p, const Vec3& x0, const Vec3& v0, double t) {
  const auto c = analytic_coefficients(p, x0, v0);

  // w(t) = (R+ + i I+) exp(-i W+ t) + (R- + i I-) exp(-i W- t), w = x + i y
  auto term = [t](double re, double im, double w) {
    const double cs = std::cos(w * t);
    const double sn = std::sin(w * t);
    // (re + i im)(cs - i sn)
    const double pr = re * cs + im * sn;
    const double pi = im * cs - re * sn;
    // d/dt = -i w (pr + i pi)
    return std::array<double, 4>{pr, pi, w * pi, -w * pr};
  };
  const auto a = term(c.R_plus, c.I_plus, c.Omega_plus);
  const auto b = term(c.R_minus, c.I_minus, c.Omega_minus);

  Vec3 x{a[0] + b[0], a[1] + b[1], 0.0};
  Vec3 v{a[2] + b[2], a[3] + b[3], 0.0};
  if (c.omega_tilde > 0.0) {
    const double cs = std::cos(c.omega_tilde * t);
    const double sn = std::sin(c.omega_tilde * t);
    x.z = x0.z * cs + v0.z / c.omega_tilde * sn;
    v.z = -x0.z * c.omega_tilde * sn + v0.z * cs;
  } else {
    x.z = x0.z + v0.z * t;
    v.z = v0.z;
  }
  return {x, v};
}

// --- Force model -------------------------------------------------------------

/// Penning trap with softened Coulomb interaction, in the shape the integrators expect.
class PenningTrap {
 public:
  PenningTrap(PenningParams params, std::vector<double> charge, std::vector<double> mass, double lambda)
      : params_(params), charge_(std::move(charge)), mass_(std::move(mass)), lambda_(lambda) {
    params_.validate();
    if (charge_.size() != mass_.size()) throw ParameterError("charge and mass arrays differ in length");
    for (double m : mass_)
      if (!(m > 0.0)) throw ParameterError("particle masses must be positive");
    if (charge_.size() > 1 && !(lambda_ > 0.0))
      throw ParameterError("Coulomb smoothing length lambda must be positive for N > 1");
  }

  explicit PenningTrap(PenningParams params) : PenningTrap(params, {params.alpha}, {1.0}, 0.01) {}

  PenningTrap(PenningParams params, const ParticleEnsemble& ens)
      : PenningTrap(params, ens.charge, ens.mass, ens.lambda) {}

  [[nodiscard]] std::size_t particle_count() const noexcept { return charge_.size(); }
  [[nodiscard]] const PenningParams& params() const noexcept { return params_; }
  [[nodiscard]] double charge_to_mass(std::size_t i) const noexcept { return charge_[i] / mass_[i]; }
  [[nodiscard]] Vec3 magnetic_field(const Vec3& /*x*/) const noexcept { return b_ext(params_); }
  [[nodiscard]] static constexpr bool uniform_magnetic_field() noexcept { return true; }

  /// Total electric field at every particle; pairwise loop so interaction terms cancel exactly.
  void electric_field(std::span<const Vec3> x, std::span<Vec3> out) const {
    const auto n = x.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = e_ext(params_, x[i]);
    if (n < 2) return;
    const double l2 = lambda_ * lambda_;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = i + 1; k < n; ++k) {
        const Vec3 d = x[i] - x[k];
        const double r2 = dot(d, d) + l2;
        const Vec3 g = (1.0 / (r2 * std::sqrt(r2))) * d;
        out[i] += charge_[k] * g;
        out[k] -= charge_[i] * g;
      }
    }
  }

  [[nodiscard]] double total_energy(std::span<const Vec3> x, std::span<const Vec3> v) const {
    return borissdc::total_energy(params_, x, v, charge_, mass_, lambda_);
  }

  [[nodiscard]] std::span<const double> masses() const noexcept { return mass_; }

 private:
  PenningParams params_;
  std::vector<double> charge_;
  std::vector<double> mass_;
  double lambda_;
};

}  // namespace borissdc
