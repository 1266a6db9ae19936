#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

#include "gcm/types.hpp"

namespace gcm {

// Unconstrained parameterization shared by the likelihood-based fitters:
// beta free, psi through its Cholesky factor with log-diagonal, log sigma2_e.
// Any real vector maps to a valid ParameterSet, so optimizers never need
// feasibility handling.

inline int theta_size(int q) { return q + q * (q + 1) / 2 + 1; }

inline Eigen::VectorXd pack_theta(const ParameterSet& params) {
  const int q = static_cast<int>(params.beta.size());
  Eigen::LLT<Eigen::MatrixXd> llt(params.psi);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("pack_theta: psi not positive definite");
  const Eigen::MatrixXd l = llt.matrixL();
  Eigen::VectorXd theta(theta_size(q));
  int k = 0;
  for (int j = 0; j < q; ++j) theta(k++) = params.beta(j);
  for (int col = 0; col < q; ++col) {
    theta(k++) = std::log(l(col, col));
    for (int row = col + 1; row < q; ++row) theta(k++) = l(row, col);
  }
  theta(k) = std::log(params.sigma2_e);
  return theta;
}

inline ParameterSet unpack_theta(const Eigen::VectorXd& theta, int q) {
  if (theta.size() != theta_size(q)) throw std::invalid_argument("unpack_theta: bad length");
  ParameterSet params;
  params.beta.resize(q);
  int k = 0;
  for (int j = 0; j < q; ++j) params.beta(j) = theta(k++);
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(q, q);
  for (int col = 0; col < q; ++col) {
    l(col, col) = std::exp(theta(k++));
    for (int row = col + 1; row < q; ++row) l(row, col) = theta(k++);
  }
  params.psi = l * l.transpose();
  params.psi = (0.5 * (params.psi + params.psi.transpose())).eval();
  params.sigma2_e = std::exp(theta(k));
  return params;
}

/// Natural-scale vector (beta, vech(psi) row-wise, sigma2_e); the scale on
/// which standard errors are reported.
inline Eigen::VectorXd pack_natural(const ParameterSet& params) {
  return flatten_parameters(params);
}

inline ParameterSet unpack_natural(const Eigen::VectorXd& v, int q) {
  if (v.size() != theta_size(q)) throw std::invalid_argument("unpack_natural: bad length");
  ParameterSet params;
  params.beta = v.head(q);
  params.psi.resize(q, q);
  int k = q;
  for (int j = 0; j < q; ++j)
    for (int i = 0; i <= j; ++i) {
      params.psi(j, i) = v(k);
      params.psi(i, j) = v(k);
      ++k;
    }
  params.sigma2_e = v(k);
  return params;
}

}  // namespace gcm
