#pragma once

#include "borissdc/vec3.hpp"

namespace borissdc {

/// Solves (v+ - v-) = (v+ + v-) x t for v+ explicitly, with t = alpha B dt / 2.
/// The map is a rotation, so |v+| == |v-|.
inline Vec3 rotate(const Vec3& v_minus, const Vec3& t) noexcept {
  const Vec3 s = (2.0 / (1.0 + dot(t, t))) * t;
  const Vec3 v_prime = v_minus + cross(v_minus, t);
  return v_minus + cross(v_prime, s);
}

/// v_new - v_old for the trapezoidal velocity update
///
///   (v_new - v_old) / dt = alpha E_mid + c + (alpha / 2) (v_new x B_new + v_old x B_old)
///
/// solved by half kicks around a Boris rotation. The part of the magnetic
/// term that differs between B_old and B_new only involves v_old, so it is
/// folded into the kicks. Returned as an increment so callers can accumulate
/// without cancellation.
inline Vec3 boris_velocity_increment(const Vec3& v_old, double dt, double alpha, const Vec3& E_mid, const Vec3& B_old,
                                     const Vec3& B_new, const Vec3& c_term) noexcept {
  const Vec3 c_b = (0.5 * alpha) * cross(v_old, B_old - B_new);
  const Vec3 kick = (0.5 * dt) * (alpha * E_mid + c_term + c_b);
  const Vec3 v_minus = v_old + kick;
  const Vec3 t = (0.5 * alpha * dt) * B_new;
  const Vec3 s = (2.0 / (1.0 + dot(t, t))) * t;
  // v+ - v- = (v- + v- x t) x s
  return 2.0 * kick + cross(v_minus + cross(v_minus, t), s);
}

inline Vec3 boris_velocity_update(const Vec3& v_old, double dt, double alpha, const Vec3& E_mid, const Vec3& B_old,
                                  const Vec3& B_new, const Vec3& c_term) noexcept {
  return v_old + boris_velocity_increment(v_old, dt, alpha, E_mid, B_old, B_new, c_term);
}

}  // namespace borissdc
