#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "borissdc/errors.hpp"
#include "borissdc/verlet_matrices.hpp"

namespace borissdc {

enum class NodeFamily { GaussLobatto, GaussLegendre };

inline std::string to_string(NodeFamily f) {
  return f == NodeFamily::GaussLobatto ? "lobatto" : "legendre";
}

namespace detail {

/// Legendre polynomial P_n and its derivative at x, by the three-term recurrence.
inline std::pair<double, double> legendre(int n, double x) {
  if (n == 0) return {1.0, 0.0};
  double p0 = 1.0;
  double p1 = x;
  for (int k = 2; k <= n; ++k) {
    const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
    p0 = p1;
    p1 = p2;
  }
  // (1 - x^2) P_n' = n (P_{n-1} - x P_n)
  const double dp = (std::abs(1.0 - x * x) > 0.0) ? n * (p0 - x * p1) / (1.0 - x * x)
                                                   : 0.5 * n * (n + 1.0) * std::pow(x, n + 1);
  return {p1, dp};
}

/// Newton polish; stops at |dx| <= 1e-15 or after 100 iterations.
template <class Step>
double newton(double x, Step&& step) {
  for (int it = 0; it < 100; ++it) {
    const double dx = step(x);
    x -= dx;
    if (std::abs(dx) <= 1e-15) break;
  }
  return x;
}

/// Roots of P_n on [-1, 1], ascending.
inline std::vector<double> legendre_roots(int n) {
  std::vector<double> xs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    // Chebyshev-like guess, descending in i
    const double guess = std::cos(std::numbers::pi * (4.0 * (i + 1) - 1.0) / (4.0 * n + 2.0));
    const double root = newton(guess, [n](double x) {
      const auto [p, dp] = legendre(n, x);
      return p / dp;
    });
    xs[static_cast<std::size_t>(n - 1 - i)] = root;
  }
  return xs;
}

/// Lobatto points with n >= 2: endpoints plus roots of P'_{n-1}, ascending.
inline std::vector<double> lobatto_points(int n) {
  std::vector<double> xs(static_cast<std::size_t>(n));
  xs.front() = -1.0;
  xs.back() = 1.0;
  const int p = n - 1;
  for (int i = 1; i < n - 1; ++i) {
    const double guess = -std::cos(std::numbers::pi * i / p);
    xs[static_cast<std::size_t>(i)] = newton(guess, [p](double x) {
      const auto [v, dv] = legendre(p, x);
      // (1 - x^2) P'' = 2x P' - p(p+1) P
      const double ddv = (2.0 * x * dv - p * (p + 1.0) * v) / (1.0 - x * x);
      return dv / ddv;
    });
  }
  return xs;
}

/// Reference nodes on [-1, 1]; closed forms for small counts.
inline std::vector<double> reference_nodes(NodeFamily family, int m) {
  if (family == NodeFamily::GaussLobatto) {
    if (m == 2) return {-1.0, 1.0};
    if (m == 3) return {-1.0, 0.0, 1.0};
    return lobatto_points(m);
  }
  if (m == 1) return {0.0};
  if (m == 2) return {-1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0)};
  if (m == 3) return {-std::sqrt(0.6), 0.0, std::sqrt(0.6)};
  return legendre_roots(m);
}

/// Gauss-Legendre points and weights on [-1, 1].
inline std::pair<std::vector<double>, std::vector<double>> gauss_legendre(int n) {
  auto xs = reference_nodes(NodeFamily::GaussLegendre, n);
  std::vector<double> ws(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dp = legendre(n, xs[i]).second;
    ws[i] = 2.0 / ((1.0 - xs[i] * xs[i]) * dp * dp);
  }
  return {std::move(xs), std::move(ws)};
}

inline double lagrange_basis(const std::vector<double>& nodes, std::size_t j, double s) {
  double v = 1.0;
  for (std::size_t k = 0; k < nodes.size(); ++k)
    if (k != j) v *= (s - nodes[k]) / (nodes[j] - nodes[k]);
  return v;
}

/// Integral of the j-th Lagrange basis polynomial over [a, b]; exact up to degree 2n-1.
inline double integrate_basis(const std::vector<double>& nodes, std::size_t j, double a, double b,
                              const std::vector<double>& gx, const std::vector<double>& gw) {
  if (b == a) return 0.0;
  const double half = 0.5 * (b - a);
  const double mid = 0.5 * (b + a);
  double sum = 0.0;
  for (std::size_t g = 0; g < gx.size(); ++g) sum += gw[g] * lagrange_basis(nodes, j, mid + half * gx[g]);
  return half * sum;
}

/// First-difference transform: row m becomes row m minus row m-1, row 0 zero.
inline Eigen::MatrixXd row_differences(const Eigen::MatrixXd& a) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(a.rows(), a.cols());
  for (Eigen::Index m = 1; m < a.rows(); ++m) d.row(m) = a.row(m) - a.row(m - 1);
  return d;
}

}  // namespace detail

/// Collocation times tau_0 ... tau_M with tau_0 = t_left prepended.
inline std::vector<double> make_nodes(NodeFamily family, int m, double t_left, double t_right) {
  if (m < 1 || (family == NodeFamily::GaussLobatto && m < 2))
    throw ParameterError("invalid node count M=" + std::to_string(m) + " for " + to_string(family) + " nodes");
  if (!(t_right > t_left)) throw ParameterError("time interval must have positive length");
  const auto ref = detail::reference_nodes(family, m);
  const double h = t_right - t_left;
  std::vector<double> taus;
  taus.reserve(static_cast<std::size_t>(m) + 1);
  taus.push_back(t_left);
  for (double xi : ref) {
    if (xi == -1.0)
      taus.push_back(t_left);
    else if (xi == 1.0)
      taus.push_back(t_right);
    else
      taus.push_back(t_left + 0.5 * (xi + 1.0) * h);
  }
  return taus;
}

/// Nodes and every weight matrix needed by one collocation step.
///
/// All matrices are (M+1)x(M+1) with the prepended tau_0 stored at index 0,
/// so row/column 0 of Q is zero.
struct QuadratureRule {
  NodeFamily family = NodeFamily::GaussLobatto;
  int M = 0;
  double t_left = 0.0;
  double t_right = 0.0;
  std::vector<double> taus;
  std::vector<double> dtau;  // dtau[m-1] = tau_m - tau_{m-1}, m = 1..M
  Eigen::MatrixXd Q;
  Eigen::MatrixXd QQ;
  Eigen::MatrixXd S;
  Eigen::MatrixXd Sx;
  Eigen::MatrixXd SQ;
  Eigen::RowVectorXd q;
  Eigen::RowVectorXd qQ;  // q * Q, weights of the position end update
  VerletMatrices verlet;

  [[nodiscard]] double dt() const noexcept { return t_right - t_left; }
  /// Delta tau_m for m = 1..M.
  [[nodiscard]] double delta(int m) const { return dtau[static_cast<std::size_t>(m - 1)]; }
};

inline QuadratureRule build_rule(NodeFamily family, int m, double t_left, double t_right, VerletMatrices verlet) {
  auto taus = make_nodes(family, m, t_left, t_right);
  if (verlet.QE.rows() != m + 1) throw ParameterError("Verlet matrices built for a different node count");
  for (int r = 0; r <= m; ++r) {
    const double expect = taus[static_cast<std::size_t>(r)] - t_left;
    if (std::abs(verlet.QE.row(r).sum() - expect) > 1e-12 * std::max(1.0, t_right - t_left))
      throw ParameterError("Verlet matrices built on different nodes");
  }

  // Integrate on the unit interval, then scale: keeps the rule exactly affine-covariant.
  const double h = t_right - t_left;
  std::vector<double> unit(taus.size());
  for (std::size_t i = 0; i < taus.size(); ++i) unit[i] = (taus[i] - t_left) / h;
  const std::vector<double> basis_nodes(unit.begin() + 1, unit.end());
  // the basis has degree M-1, so ceil(M/2) Gauss points are exact; the
  // smallest such rule keeps M=2 on the midpoint, which is exact in floating point
  const auto [gx, gw] = detail::gauss_legendre((m + 1) / 2);

  QuadratureRule rule;
  rule.family = family;
  rule.M = m;
  rule.t_left = t_left;
  rule.t_right = t_right;
  rule.Q = Eigen::MatrixXd::Zero(m + 1, m + 1);
  rule.q = Eigen::RowVectorXd::Zero(m + 1);
  for (int row = 1; row <= m; ++row)
    for (int j = 1; j <= m; ++j)
      rule.Q(row, j) =
          h * detail::integrate_basis(basis_nodes, static_cast<std::size_t>(j - 1), 0.0, unit[static_cast<std::size_t>(row)], gx, gw);
  for (int j = 1; j <= m; ++j)
    rule.q(j) = h * detail::integrate_basis(basis_nodes, static_cast<std::size_t>(j - 1), 0.0, 1.0, gx, gw);

  rule.QQ = rule.Q * rule.Q;
  rule.qQ = rule.q * rule.Q;
  rule.S = detail::row_differences(rule.Q);
  rule.SQ = detail::row_differences(rule.QQ);
  rule.Sx = detail::row_differences(verlet.Qx);
  rule.dtau.resize(static_cast<std::size_t>(m));
  for (int r = 1; r <= m; ++r)
    rule.dtau[static_cast<std::size_t>(r - 1)] = taus[static_cast<std::size_t>(r)] - taus[static_cast<std::size_t>(r - 1)];
  rule.taus = std::move(taus);
  rule.verlet = std::move(verlet);
  return rule;
}

/// Builds the Verlet matrices on the same nodes and then the rule.
inline QuadratureRule make_rule(NodeFamily family, int m, double t_left, double t_right) {
  return build_rule(family, m, t_left, t_right, build_verlet_matrices(make_nodes(family, m, t_left, t_right)));
}

}  // namespace borissdc
