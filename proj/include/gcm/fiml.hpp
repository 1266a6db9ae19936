#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "gcm/model.hpp"
#include "gcm/optimize.hpp"
#include "gcm/param_transform.hpp"
#include "gcm/rng.hpp"
#include "gcm/types.hpp"

namespace gcm {

struct FimlOptions {
  double tol = 1e-6;      // gradient-norm convergence tolerance
  int max_iter = 500;
  int extra_starts = 3;   // jittered restarts on non-convergence
  double fd_step = 1e-5;
};

/// Observed-data log-likelihood: each subject contributes the normal
/// log-density of their observed subvector under the implied moments
/// restricted to the observed occasions.
inline double fiml_loglik(const GrowthModelSpec& spec, const ParameterSet& params,
                          const LongitudinalDataset& data) {
  const Eigen::VectorXd mu = implied_mean(spec, params);
  const Eigen::MatrixXd sigma = implied_covariance(spec, params);
  constexpr double log_two_pi = 1.8378770664093453;

  double loglik = 0.0;
  for (const auto& group : group_missing_patterns(data)) {
    const auto& occ = group.occasions;
    const Eigen::MatrixXd sigma_sub = select_square(sigma, occ);
    const Eigen::VectorXd mu_sub = select_entries(mu, occ);
    Eigen::LLT<Eigen::MatrixXd> llt(sigma_sub);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("fiml_loglik: singular observed-data covariance");
    double logdet = 0.0;
    const Eigen::MatrixXd l = llt.matrixL();
    for (int k = 0; k < l.rows(); ++k) logdet += 2.0 * std::log(l(k, k));
    const double base = -0.5 * (static_cast<double>(occ.size()) * log_two_pi + logdet);

    Eigen::VectorXd resid(occ.size());
    for (int i : group.subjects) {
      for (std::size_t k = 0; k < occ.size(); ++k)
        resid(k) = data.values(i, occ[k]) - mu_sub(k);
      const Eigen::VectorXd half = l.triangularView<Eigen::Lower>().solve(resid);
      loglik += base - 0.5 * half.squaredNorm();
    }
  }
  return loglik;
}

/// Start values: occasion-wise observed means regressed on the loadings,
/// psi = I, sigma2_e = pooled residual variance about the implied line.
inline ParameterSet fiml_start_values(const GrowthModelSpec& spec,
                                      const LongitudinalDataset& data) {
  const int T = spec.occasions();
  const int q = spec.effects();
  Eigen::VectorXd means = Eigen::VectorXd::Zero(T);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(T);
  for (int i = 0; i < data.n(); ++i)
    for (int t = 0; t < T; ++t)
      if (data.mask(i, t)) {
        means(t) += data.values(i, t);
        counts(t) += 1.0;
      }
  for (int t = 0; t < T; ++t) means(t) = counts(t) > 0 ? means(t) / counts(t) : 0.0;

  ParameterSet start;
  start.beta =
      (spec.loadings.transpose() * spec.loadings).ldlt().solve(spec.loadings.transpose() * means);
  start.psi = Eigen::MatrixXd::Identity(q, q);
  const Eigen::VectorXd line = spec.loadings * start.beta;
  double ss = 0.0, n_obs = 0.0;
  for (int i = 0; i < data.n(); ++i)
    for (int t = 0; t < T; ++t)
      if (data.mask(i, t)) {
        const double r = data.values(i, t) - line(t);
        ss += r * r;
        n_obs += 1.0;
      }
  start.sigma2_e = std::max(1e-3, n_obs > 0 ? ss / n_obs : 1.0);
  return start;
}

namespace fiml_detail {

inline LongitudinalDataset drop_empty_subjects(const LongitudinalDataset& data, int* dropped) {
  *dropped = 0;
  std::vector<int> keep;
  for (int i = 0; i < data.n(); ++i) {
    if (data.observed_count(i) > 0)
      keep.push_back(i);
    else
      ++*dropped;
  }
  if (*dropped == 0) return data;
  LongitudinalDataset out;
  out.values.resize(keep.size(), data.occasions());
  out.mask.resize(keep.size(), data.occasions());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.values.row(k) = data.values.row(keep[k]);
    for (int t = 0; t < data.occasions(); ++t) out.mask(k, t) = data.mask(keep[k], t);
    if (!data.subject_ids.empty()) out.subject_ids.push_back(data.subject_ids[keep[k]]);
  }
  return out;
}

/// Standard errors from the numerically differentiated observed information
/// on the natural scale. Returns an empty vector if the information matrix
/// is not invertible.
inline Eigen::VectorXd observed_information_se(const Objective& negloglik_natural,
                                               const Eigen::VectorXd& natural) {
  const Eigen::MatrixXd hess = numerical_hessian(negloglik_natural, natural, 1e-4);
  if (!hess.allFinite()) return {};
  Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
  if (ldlt.info() != Eigen::Success) return {};
  const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(hess.rows(), hess.cols()));
  Eigen::VectorXd se(hess.rows());
  for (int i = 0; i < se.size(); ++i) se(i) = cov(i, i) > 0 ? std::sqrt(cov(i, i)) : NAN;
  return se;
}

}  // namespace fiml_detail

/// Quasi-Newton maximization of fiml_loglik over the unconstrained
/// parameterization, with jittered restarts on non-convergence.
inline FitResult fiml_fit(const GrowthModelSpec& spec, const LongitudinalDataset& data,
                          const FimlOptions& options = {}) {
  int dropped = 0;
  const LongitudinalDataset use = fiml_detail::drop_empty_subjects(data, &dropped);
  if (use.n() == 0) throw DataError("fiml_fit: no usable subjects");
  const int q = spec.effects();

  const Objective objective = [&](const Eigen::VectorXd& theta) -> double {
    try {
      return -fiml_loglik(spec, unpack_theta(theta, q), use);
    } catch (const std::exception&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  OptimOptions opt;
  opt.grad_tol = options.tol;
  opt.max_iter = options.max_iter;
  opt.fd_step = options.fd_step;

  Eigen::VectorXd theta0 = pack_theta(fiml_start_values(spec, use));
  OptimResult best = bfgs_minimize(objective, theta0, opt);
  int restarts = 0;
  if (!best.converged) {
    Rng jitter_rng = make_rng(0x6f7074696dULL);  // fixed: fits must be deterministic
    for (int attempt = 0; attempt < options.extra_starts && !best.converged; ++attempt) {
      ++restarts;
      Eigen::VectorXd start = theta0;
      for (int i = 0; i < start.size(); ++i) start(i) += 0.25 * draw_normal(jitter_rng);
      OptimResult trial = bfgs_minimize(objective, start, opt);
      if (trial.converged || trial.value < best.value) best = trial;
    }
  }

  FitResult result;
  result.method = "fiml";
  result.estimates = unpack_theta(best.x, q);
  result.converged = best.converged;
  result.diagnostics["loglik"] = -best.value;
  result.diagnostics["grad_norm"] = best.grad_norm;
  result.diagnostics["iterations"] = best.iterations;
  result.diagnostics["restarts"] = restarts;
  result.diagnostics["n"] = use.n();
  result.diagnostics["subjects_dropped"] = dropped;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(result.estimates.psi);
  const bool boundary =
      eig.eigenvalues().minCoeff() < 1e-6 || result.estimates.sigma2_e < 1e-8;
  result.diagnostics["boundary"] = boundary ? 1.0 : 0.0;

  const Objective neg_natural = [&](const Eigen::VectorXd& v) -> double {
    try {
      return -fiml_loglik(spec, unpack_natural(v, q), use);
    } catch (const std::exception&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  const Eigen::VectorXd se =
      fiml_detail::observed_information_se(neg_natural, pack_natural(result.estimates));
  const auto names = parameter_names(spec);
  if (se.size() == static_cast<Eigen::Index>(names.size()))
    for (std::size_t k = 0; k < names.size(); ++k) result.std_error[names[k]] = se(k);
  return result;
}

}  // namespace gcm
