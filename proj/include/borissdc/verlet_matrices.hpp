#pragma once

#include <Eigen/Dense>

#include <vector>

#include "borissdc/errors.hpp"

namespace borissdc {

/// Composite velocity-Verlet propagation matrices on tau_0..tau_M.
///
/// QE/QI are the explicit/implicit Euler patterns, QT their average (the
/// trapezoidal velocity update) and Qx the matrix that maps forces to
/// positions once the velocity recursion has been substituted.
struct VerletMatrices {
  Eigen::MatrixXd QE;
  Eigen::MatrixXd QI;
  Eigen::MatrixXd QT;
  Eigen::MatrixXd Qx;
};

inline VerletMatrices build_verlet_matrices(const std::vector<double>& taus) {
  if (taus.empty()) throw ParameterError("at least one node required");
  const auto n = static_cast<Eigen::Index>(taus.size());
  for (Eigen::Index m = 1; m < n; ++m)
    if (taus[static_cast<std::size_t>(m)] < taus[static_cast<std::size_t>(m - 1)])
      throw ParameterError("node times must be non-decreasing");

  VerletMatrices vm;
  vm.QE = Eigen::MatrixXd::Zero(n, n);
  vm.QI = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index m = 1; m < n; ++m) {
    for (Eigen::Index l = 1; l <= m; ++l) {
      const double d = taus[static_cast<std::size_t>(l)] - taus[static_cast<std::size_t>(l - 1)];
      vm.QE(m, l - 1) = d;
      vm.QI(m, l) = d;
    }
  }
  vm.QT = 0.5 * (vm.QE + vm.QI);
  vm.Qx = vm.QE * vm.QT + 0.5 * vm.QE.cwiseProduct(vm.QE);
  return vm;
}

}  // namespace borissdc
