#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>

namespace gcm {

using Objective = std::function<double(const Eigen::VectorXd&)>;

struct OptimOptions {
  double grad_tol = 1e-6;   // infinity norm of the numerical gradient
  int max_iter = 500;
  double fd_step = 1e-5;    // relative central-difference step
};

struct OptimResult {
  Eigen::VectorXd x;
  double value = std::numeric_limits<double>::infinity();
  double grad_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

inline Eigen::VectorXd numerical_gradient(const Objective& f, const Eigen::VectorXd& x,
                                          double step = 1e-5) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (int i = 0; i < x.size(); ++i) {
    const double h = step * std::max(1.0, std::abs(x(i)));
    xp(i) = x(i) + h;
    const double fp = f(xp);
    xp(i) = x(i) - h;
    const double fm = f(xp);
    xp(i) = x(i);
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline Eigen::MatrixXd numerical_hessian(const Objective& f, const Eigen::VectorXd& x,
                                         double step = 1e-4) {
  const int n = static_cast<int>(x.size());
  Eigen::MatrixXd h(n, n);
  Eigen::VectorXd steps(n);
  for (int i = 0; i < n; ++i) steps(i) = step * std::max(1.0, std::abs(x(i)));
  const double f0 = f(x);
  Eigen::VectorXd xp = x;
  for (int i = 0; i < n; ++i) {
    xp(i) = x(i) + steps(i);
    const double fp = f(xp);
    xp(i) = x(i) - steps(i);
    const double fm = f(xp);
    xp(i) = x(i);
    h(i, i) = (fp - 2.0 * f0 + fm) / (steps(i) * steps(i));
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      xp(i) = x(i) + steps(i); xp(j) = x(j) + steps(j);
      const double fpp = f(xp);
      xp(j) = x(j) - steps(j);
      const double fpm = f(xp);
      xp(i) = x(i) - steps(i); xp(j) = x(j) + steps(j);
      const double fmp = f(xp);
      xp(j) = x(j) - steps(j);
      const double fmm = f(xp);
      xp(i) = x(i); xp(j) = x(j);
      h(i, j) = h(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * steps(i) * steps(j));
    }
  }
  return h;
}

/// BFGS with numerical gradients and Armijo backtracking. Objectives may
/// return +inf or NaN outside their numerically safe region; such points are
/// rejected by the line search.
inline OptimResult bfgs_minimize(const Objective& f, Eigen::VectorXd x0,
                                 const OptimOptions& opts = {}) {
  const int n = static_cast<int>(x0.size());
  OptimResult res;
  res.x = std::move(x0);
  res.value = f(res.x);
  if (!std::isfinite(res.value)) return res;

  Eigen::MatrixXd hinv = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd grad = numerical_gradient(f, res.x, opts.fd_step);
  bool first_update = true;

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    res.iterations = iter;
    res.grad_norm = grad.lpNorm<Eigen::Infinity>();
    if (res.grad_norm < opts.grad_tol) {
      res.converged = true;
      return res;
    }

    Eigen::VectorXd dir = -hinv * grad;
    double slope = grad.dot(dir);
    if (!(slope < 0.0)) {  // reset on loss of descent direction
      hinv.setIdentity();
      dir = -grad;
      slope = grad.dot(dir);
      if (!(slope < 0.0)) break;
    }

    double alpha = 1.0;
    double fnew = std::numeric_limits<double>::infinity();
    Eigen::VectorXd xnew;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      xnew = res.x + alpha * dir;
      fnew = f(xnew);
      if (std::isfinite(fnew) && fnew <= res.value + 1e-4 * alpha * slope) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;  // objective is flat to FP precision along dir

    Eigen::VectorXd gnew = numerical_gradient(f, xnew, opts.fd_step);
    const Eigen::VectorXd s = xnew - res.x;
    const Eigen::VectorXd y = gnew - grad;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (first_update) {
        hinv *= sy / y.squaredNorm();
        first_update = false;
      }
      const Eigen::VectorXd hy = hinv * y;
      const double yhy = y.dot(hy);
      hinv += ((sy + yhy) / (sy * sy)) * (s * s.transpose());
      hinv -= (hy * s.transpose() + s * hy.transpose()) / sy;
    }
    res.x = xnew;
    res.value = fnew;
    grad = gnew;
  }
  res.grad_norm = grad.lpNorm<Eigen::Infinity>();
  res.converged = res.grad_norm < opts.grad_tol;
  return res;
}

}  // namespace gcm
