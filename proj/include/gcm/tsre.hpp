#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "gcm/distributions.hpp"
#include "gcm/model.hpp"
#include "gcm/optimize.hpp"
#include "gcm/param_transform.hpp"
#include "gcm/types.hpp"

namespace gcm {

struct TsreOptions {
  double huber_prob = 0.10;  // tail probability of the chi-square tuning quantile
  double tol = 1e-6;
  int max_iter = 200;        // stage-1 reweighting iterations
  int stage2_max_iter = 500;
};

/// Robust saturated moments from stage 1.
struct RobustSaturated {
  Eigen::VectorXd mu_hat;
  Eigen::MatrixXd sigma_hat;
  Eigen::VectorXd weights;  // final per-subject mean weights, in (0,1]
  int iterations = 0;
};

namespace tsre_detail {

struct HuberTuning {
  double rho;    // distance cutoff
  double kappa;  // consistency constant so cov weights are unbiased at the normal
};

/// Tuning for dimension p at tail probability prob:
/// rho^2 is the chi^2_p quantile at 1 - prob and
/// kappa = E[min(d, rho)^2 d^2] / (p ... ) evaluated in closed form via
/// chi-square CDFs, so that E[w2 d^2] = p under normality.
inline HuberTuning huber_tuning(int p, double prob) {
  if (prob <= 0.0) return {std::numeric_limits<double>::infinity(), 1.0};
  const double rho2 = chi_squared_quantile(1.0 - prob, p);
  const double kappa =
      chi_squared_cdf(rho2, p + 2) + (rho2 / p) * (1.0 - chi_squared_cdf(rho2, p));
  return {std::sqrt(rho2), kappa};
}

}  // namespace tsre_detail

/// Stage 1: iteratively reweighted estimating equations for the saturated
/// mean and covariance. Missing entries are replaced by conditional means
/// under the current moments and the covariance update carries the matched
/// conditional-covariance correction. Huber weights enter the mean linearly
/// and the covariance as w^2 / kappa.
inline RobustSaturated stage1_robust(const LongitudinalDataset& data,
                                     const TsreOptions& options = {}) {
  const int T = data.occasions();
  const int n = data.n();
  if (n <= T) throw std::invalid_argument("stage1_robust: need more subjects than occasions");
  if (!(options.huber_prob >= 0.0 && options.huber_prob < 1.0))
    throw std::invalid_argument("huber_prob must lie in [0,1)");

  // Initial moments from available cases.
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(T);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(T);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < T; ++t)
      if (data.mask(i, t)) {
        mu(t) += data.values(i, t);
        counts(t) += 1.0;
      }
  for (int t = 0; t < T; ++t) {
    if (counts(t) == 0) throw std::runtime_error("stage1_robust: occasion with no observations");
    mu(t) /= counts(t);
  }
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(T, T);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < T; ++t)
      if (data.mask(i, t)) {
        const double r = data.values(i, t) - mu(t);
        sigma(t, t) += r * r / counts(t);
      }
  for (int t = 0; t < T; ++t) sigma(t, t) = std::max(sigma(t, t), 1e-8);

  std::vector<tsre_detail::HuberTuning> tuning(T + 1);
  for (int p = 1; p <= T; ++p) tuning[p] = tsre_detail::huber_tuning(p, options.huber_prob);

  const auto groups = group_missing_patterns(data);
  RobustSaturated out;
  out.weights.resize(n);

  for (int iter = 1; iter <= options.max_iter; ++iter) {
    Eigen::VectorXd mu_num = Eigen::VectorXd::Zero(T);
    double w1_sum = 0.0;
    // First pass: weights and conditional-mean completions.
    Eigen::MatrixXd completed(n, T);
    Eigen::VectorXd w2_all(n);
    std::vector<Eigen::MatrixXd> cond_cov(groups.size());

    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& grp = groups[g];
      const auto& occ = grp.occasions;
      const int p = static_cast<int>(occ.size());
      std::vector<int> missing;
      for (int t = 0; t < T; ++t)
        if (std::find(occ.begin(), occ.end(), t) == occ.end()) missing.push_back(t);

      const Eigen::MatrixXd s_oo = select_square(sigma, occ);
      Eigen::LLT<Eigen::MatrixXd> llt(s_oo);
      if (llt.info() != Eigen::Success)
        throw std::runtime_error("stage1_robust: degenerate covariance");

      Eigen::MatrixXd s_mo(missing.size(), p);
      for (std::size_t a = 0; a < missing.size(); ++a)
        for (int b = 0; b < p; ++b) s_mo(a, b) = sigma(missing[a], occ[b]);
      Eigen::MatrixXd cond_coef;  // s_mo * s_oo^{-1}
      if (!missing.empty()) {
        cond_coef = llt.solve(s_mo.transpose()).transpose();
        Eigen::MatrixXd s_mm(missing.size(), missing.size());
        for (std::size_t a = 0; a < missing.size(); ++a)
          for (std::size_t b = 0; b < missing.size(); ++b)
            s_mm(a, b) = sigma(missing[a], missing[b]);
        cond_cov[g] = s_mm - cond_coef * s_mo.transpose();
      } else {
        cond_cov[g].resize(0, 0);
      }

      const Eigen::VectorXd mu_obs = select_entries(mu, occ);
      const auto& tune = tuning[p];
      Eigen::VectorXd resid(p);
      for (int i : grp.subjects) {
        for (int b = 0; b < p; ++b) resid(b) = data.values(i, occ[b]) - mu_obs(b);
        const double d2 = llt.matrixL().solve(resid).squaredNorm();
        const double d = std::sqrt(std::max(d2, 0.0));
        const double w1 = (d <= tune.rho) ? 1.0 : tune.rho / d;
        const double w2 = w1 * w1 / tune.kappa;
        out.weights(i) = w1;
        w2_all(i) = w2;

        Eigen::VectorXd filled = mu;
        for (int b = 0; b < p; ++b) filled(occ[b]) = data.values(i, occ[b]);
        if (!missing.empty()) {
          const Eigen::VectorXd cm = cond_coef * resid;
          for (std::size_t a = 0; a < missing.size(); ++a)
            filled(missing[a]) = mu(missing[a]) + cm(a);
        }
        completed.row(i) = filled.transpose();
        mu_num += w1 * filled;
        w1_sum += w1;
      }
    }

    const Eigen::VectorXd mu_new = mu_num / w1_sum;
    Eigen::MatrixXd sigma_new = Eigen::MatrixXd::Zero(T, T);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& grp = groups[g];
      const auto& occ = grp.occasions;
      std::vector<int> missing;
      for (int t = 0; t < T; ++t)
        if (std::find(occ.begin(), occ.end(), t) == occ.end()) missing.push_back(t);
      for (int i : grp.subjects) {
        const Eigen::VectorXd dev = completed.row(i).transpose() - mu_new;
        sigma_new += w2_all(i) * (dev * dev.transpose());
        for (std::size_t a = 0; a < missing.size(); ++a)
          for (std::size_t b = 0; b < missing.size(); ++b)
            sigma_new(missing[a], missing[b]) += w2_all(i) * cond_cov[g](a, b);
      }
    }
    sigma_new /= static_cast<double>(n);
    sigma_new = (0.5 * (sigma_new + sigma_new.transpose())).eval();

    const double delta =
        std::max((mu_new - mu).lpNorm<Eigen::Infinity>(),
                 (sigma_new - sigma).lpNorm<Eigen::Infinity>());
    mu = mu_new;
    sigma = sigma_new;
    out.iterations = iter;
    if (delta < options.tol) {
      out.mu_hat = mu;
      out.sigma_hat = sigma;
      return out;
    }
  }
  throw std::runtime_error("stage1_robust: no convergence within max_iter");
}

/// Maximum-likelihood discrepancy between robust saturated moments and the
/// model-implied moments:
///   F = tr(S Sigma^{-1}) - log|S Sigma^{-1}| - T + (m - mu)' Sigma^{-1} (m - mu).
inline double ml_discrepancy(const RobustSaturated& rob, const GrowthModelSpec& spec,
                             const ParameterSet& params) {
  const int T = spec.occasions();
  const Eigen::MatrixXd sigma = implied_covariance(spec, params);
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) throw std::runtime_error("ml_discrepancy: singular Sigma");
  Eigen::LLT<Eigen::MatrixXd> llt_hat(rob.sigma_hat);
  if (llt_hat.info() != Eigen::Success)
    throw std::invalid_argument("ml_discrepancy: sigma_hat not positive definite");

  double logdet_sigma = 0.0, logdet_hat = 0.0;
  for (int k = 0; k < T; ++k) {
    logdet_sigma += 2.0 * std::log(Eigen::MatrixXd(llt.matrixL())(k, k));
    logdet_hat += 2.0 * std::log(Eigen::MatrixXd(llt_hat.matrixL())(k, k));
  }
  const double trace = llt.solve(rob.sigma_hat).trace();
  const Eigen::VectorXd diff = rob.mu_hat - implied_mean(spec, params);
  const double quad = diff.dot(llt.solve(diff));
  return trace - (logdet_hat - logdet_sigma) - T + quad;
}

namespace tsre_detail {

inline ParameterSet stage2_start(const RobustSaturated& rob, const GrowthModelSpec& spec) {
  const int q = spec.effects();
  const int T = spec.occasions();
  const Eigen::MatrixXd& lam = spec.loadings;
  const Eigen::MatrixXd pinv = (lam.transpose() * lam).ldlt().solve(lam.transpose());
  ParameterSet start;
  start.beta = pinv * rob.mu_hat;
  const Eigen::MatrixXd proj = lam * pinv;
  const Eigen::MatrixXd off = (Eigen::MatrixXd::Identity(T, T) - proj) * rob.sigma_hat *
                              (Eigen::MatrixXd::Identity(T, T) - proj).transpose();
  double sigma2 = off.trace() / std::max(1, T - q);
  sigma2 = std::max(sigma2, 1e-3);
  Eigen::MatrixXd psi =
      pinv * (rob.sigma_hat - sigma2 * Eigen::MatrixXd::Identity(T, T)) * pinv.transpose();
  psi = (0.5 * (psi + psi.transpose())).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(psi);
  Eigen::VectorXd vals = eig.eigenvalues().cwiseMax(0.05);
  start.psi = eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
  start.sigma2_e = sigma2;
  return start;
}

}  // namespace tsre_detail

/// Stage 2: fit the growth model to the robust moments by minimizing the
/// ML discrepancy over the shared unconstrained parameterization.
inline FitResult stage2_fit(const RobustSaturated& rob, const GrowthModelSpec& spec,
                            const TsreOptions& options = {}) {
  const int q = spec.effects();
  const Objective objective = [&](const Eigen::VectorXd& theta) -> double {
    try {
      return ml_discrepancy(rob, spec, unpack_theta(theta, q));
    } catch (const std::exception&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  OptimOptions opt;
  opt.grad_tol = options.tol;
  opt.max_iter = options.stage2_max_iter;
  const OptimResult best = bfgs_minimize(objective, pack_theta(tsre_detail::stage2_start(rob, spec)), opt);

  FitResult result;
  result.method = "tsre";
  result.estimates = unpack_theta(best.x, q);
  result.converged = best.converged;
  result.diagnostics["discrepancy"] = best.value;
  result.diagnostics["grad_norm"] = best.grad_norm;
  result.diagnostics["iterations"] = best.iterations;
  result.diagnostics["stage1_iterations"] = rob.iterations;
  result.diagnostics["weight_min"] = rob.weights.minCoeff();
  result.diagnostics["weight_mean"] = rob.weights.mean();

  // SE convention: information approximated by (n/2) * Hessian of F on the
  // natural scale, matching the complete-data ML correspondence.
  const double n = static_cast<double>(rob.weights.size());
  const Objective scaled = [&](const Eigen::VectorXd& v) -> double {
    try {
      return 0.5 * n * ml_discrepancy(rob, spec, unpack_natural(v, q));
    } catch (const std::exception&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  const Eigen::MatrixXd hess = numerical_hessian(scaled, pack_natural(result.estimates), 1e-4);
  if (hess.allFinite()) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
    if (ldlt.info() == Eigen::Success) {
      const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(hess.rows(), hess.cols()));
      const auto names = parameter_names(spec);
      for (std::size_t k = 0; k < names.size(); ++k)
        result.std_error[names[k]] = cov(k, k) > 0 ? std::sqrt(cov(k, k)) : NAN;
    }
  }
  return result;
}

struct TsreFit {
  FitResult result;
  RobustSaturated stage1;
};

inline TsreFit tsre_fit(const GrowthModelSpec& spec, const LongitudinalDataset& data,
                        const TsreOptions& options = {}) {
  TsreFit fit;
  fit.stage1 = stage1_robust(data, options);
  fit.result = stage2_fit(fit.stage1, spec, options);
  return fit;
}

}  // namespace gcm
