#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gcm/distributions.hpp"
#include "gcm/geweke.hpp"
#include "gcm/model.hpp"
#include "gcm/rng.hpp"
#include "gcm/types.hpp"

// Median-based Bayesian growth curve sampler. The outcome model treats each
// cell as asymmetric-Laplace at tau = 1/2 around the subject's latent line,
// which makes the posterior mode of the fixed effects the minimizer of the
// summed absolute residuals. The AL likelihood is augmented with one
// exponential latent weight per cell, turning every parameter block into a
// normal/inverse-Wishart/inverse-gamma conditional. Full derivations live in
// docs/derivations.md.

namespace gcm {

struct RmbPriors {
  double beta_prior_var = 1e3;      // N(0, v) per fixed effect
  Eigen::MatrixXd psi_scale;        // inverse-Wishart scale; empty => I_q
  double psi_df = 0.0;              // inverse-Wishart df; <= 0 => q + 1
  double sigma_shape = 0.001;       // inverse-gamma prior on the AL scale
  double sigma_rate = 0.001;
  double alpha_prior_var = 100.0;   // N(0, v) per selection coefficient

  Eigen::MatrixXd psi_scale_for(int q) const {
    if (psi_scale.size() == 0) return Eigen::MatrixXd::Identity(q, q);
    if (psi_scale.rows() != q || psi_scale.cols() != q)
      throw std::invalid_argument("psi_scale dimension mismatch");
    return psi_scale;
  }
  double psi_df_for(int q) const { return psi_df > 0.0 ? psi_df : q + 1.0; }
};

struct ChainConfig {
  int n_iter = 60000;
  int burnin = -1;  // -1 resolves to n_iter / 2
  std::uint64_t seed = 0;
  double mh_step = 0.5;  // initial random-walk scale; adapted during burn-in
  bool adapt = true;
  bool keep_draws = false;

  int burnin_resolved() const {
    const int b = burnin < 0 ? n_iter / 2 : burnin;
    if (b >= n_iter) throw std::invalid_argument("burnin must be smaller than n_iter");
    return b;
  }
};

/// Coefficients of the missingness logit:
/// logit Pr(R_it = 1) = alpha0 + alpha1 y_{i,t-1} + alpha2 y_it.
struct SelectionParams {
  double alpha0 = 0.0;
  double alpha1 = 0.0;
  double alpha2 = 0.0;
};

inline double selection_logit(const SelectionParams& alpha, double y_prev, double y_curr) {
  return logistic(alpha.alpha0 + alpha.alpha1 * y_prev + alpha.alpha2 * y_curr);
}

/// Full augmented Gibbs state. `y` holds the working outcome matrix: observed
/// cells always equal the data, masked cells carry the current imputation.
struct AugmentedState {
  Eigen::VectorXd beta;   // q
  Eigen::MatrixXd u;      // N x q random effects
  Eigen::MatrixXd psi;    // q x q
  double sigma = 1.0;     // AL scale
  Eigen::MatrixXd w;      // N x T latent exponential weights
  Eigen::MatrixXd y;      // N x T working outcomes
  std::optional<SelectionParams> alpha;
};

namespace rmb_detail {

// Small fixed-capacity matrices keep the per-subject conjugate updates off
// the heap. Caps q at 8, far above any trajectory model used here.
using SmallMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, 8, 8>;
using SmallVec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, 8, 1>;

/// Draw from N(A^{-1} rhs, A^{-1}) given the precision matrix A.
inline SmallVec precision_draw(const SmallMat& precision, const SmallVec& rhs, Rng& rng) {
  Eigen::LLT<SmallMat> llt(precision);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("precision_draw: conditional precision not PD");
  SmallVec z(rhs.size());
  for (int i = 0; i < z.size(); ++i) z(i) = draw_normal(rng);
  return llt.solve(rhs) + llt.matrixU().solve(z);
}

inline double log_bernoulli(bool hit, double linear) {
  // log p for hit, log(1-p) otherwise, with p = logistic(linear).
  const double x = hit ? linear : -linear;
  if (x > 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

}  // namespace rmb_detail

// ---------------------------------------------------------------------------
// Update blocks. All conjugate blocks act on the fully augmented outcome
// matrix; sweep order is w, u, beta, psi, sigma, missing y, alpha.
// ---------------------------------------------------------------------------

/// Latent weights: w_it | rest ~ GIG(1/2, r_it^2 / (8 sigma), 2 / sigma)
/// with r_it the current residual.
inline void update_latent_weights(AugmentedState& state, const GrowthModelSpec& spec, Rng& rng) {
  const int n = static_cast<int>(state.y.rows());
  const int T = spec.occasions();
  const double psi_gig = 2.0 / state.sigma;
  rmb_detail::SmallVec effect(spec.effects());
  for (int i = 0; i < n; ++i) {
    effect = state.beta + state.u.row(i).transpose();
    for (int t = 0; t < T; ++t) {
      const double resid = state.y(i, t) - spec.loadings.row(t).dot(effect);
      state.w(i, t) = gig_half_draw(resid * resid / (8.0 * state.sigma), psi_gig, rng);
    }
  }
}

/// Random effects: normal conditionals with per-cell variances 8 sigma w_it.
inline void update_random_effects(AugmentedState& state, const GrowthModelSpec& spec, Rng& rng) {
  using rmb_detail::SmallMat;
  using rmb_detail::SmallVec;
  const int n = static_cast<int>(state.y.rows());
  const int T = spec.occasions();
  const int q = spec.effects();
  const SmallMat psi_inv = SmallMat(state.psi).llt().solve(SmallMat::Identity(q, q));
  SmallMat a(q, q);
  SmallVec rhs(q);
  for (int i = 0; i < n; ++i) {
    a = psi_inv;
    rhs.setZero();
    for (int t = 0; t < T; ++t) {
      const double prec = 1.0 / (8.0 * state.sigma * state.w(i, t));
      const auto lam = spec.loadings.row(t).transpose();
      a.noalias() += prec * (lam * lam.transpose());
      rhs.noalias() += prec * (state.y(i, t) - lam.dot(state.beta)) * lam;
    }
    state.u.row(i) = rmb_detail::precision_draw(a, rhs, rng).transpose();
  }
}

inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> fixed_effects_conditional(
    const AugmentedState& state, const GrowthModelSpec& spec, const RmbPriors& priors) {
  const int n = static_cast<int>(state.y.rows());
  const int T = spec.occasions();
  const int q = spec.effects();
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(q, q) / priors.beta_prior_var;
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(q);
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < T; ++t) {
      const double prec = 1.0 / (8.0 * state.sigma * state.w(i, t));
      const auto lam = spec.loadings.row(t).transpose();
      a.noalias() += prec * (lam * lam.transpose());
      rhs.noalias() += prec * (state.y(i, t) - lam.dot(state.u.row(i))) * lam;
    }
  }
  const Eigen::MatrixXd cov = a.llt().solve(Eigen::MatrixXd::Identity(q, q));
  return {cov * rhs, cov};
}

inline void update_fixed_effects(AugmentedState& state, const GrowthModelSpec& spec,
                                 const RmbPriors& priors, Rng& rng) {
  const auto [mean, cov] = fixed_effects_conditional(state, spec, priors);
  state.beta = mvn_draw_cov(mean, cov, rng);
}

/// Moments of beta | w, psi, sigma, y with the random effects integrated out:
/// y_i | beta ~ N(loadings beta, loadings psi loadings' + D_i). Reduced to
/// q x q algebra through the Woodbury identity, with A_i = L' D_i^{-1} L:
///   L' V_i^{-1} L = A_i - A_i (psi^{-1} + A_i)^{-1} A_i,
/// and the matching expression for L' V_i^{-1} y_i.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> marginal_fixed_effects_conditional(
    const AugmentedState& state, const GrowthModelSpec& spec, const RmbPriors& priors) {
  using rmb_detail::SmallMat;
  using rmb_detail::SmallVec;
  const int n = static_cast<int>(state.y.rows());
  const int T = spec.occasions();
  const int q = spec.effects();
  const SmallMat psi_inv = SmallMat(state.psi).llt().solve(SmallMat::Identity(q, q));
  Eigen::MatrixXd b = Eigen::MatrixXd::Identity(q, q) / priors.beta_prior_var;
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(q);
  SmallMat a(q, q);
  SmallVec m(q);
  for (int i = 0; i < n; ++i) {
    a.setZero();
    m.setZero();
    for (int t = 0; t < T; ++t) {
      const double prec = 1.0 / (8.0 * state.sigma * state.w(i, t));
      const auto lam = spec.loadings.row(t).transpose();
      a.noalias() += prec * (lam * lam.transpose());
      m.noalias() += prec * state.y(i, t) * lam;
    }
    const Eigen::LLT<SmallMat> llt(SmallMat(psi_inv + a));
    const SmallMat ka = llt.solve(a);   // (psi^{-1} + A)^{-1} A
    const SmallVec km = llt.solve(m);
    b.noalias() += a - a * ka;
    rhs.noalias() += m - a * km;
  }
  b = (0.5 * (b + b.transpose())).eval();
  const Eigen::MatrixXd cov = b.llt().solve(Eigen::MatrixXd::Identity(q, q));
  return {cov * rhs, cov};
}

/// Blocked (beta, u) draw: beta from its u-marginalized conditional, then
/// u | beta. Equivalent in distribution to the two separate conjugate draws
/// but avoids the slow random walk the centered pair exhibits.
inline void update_effects_block(AugmentedState& state, const GrowthModelSpec& spec,
                                 const RmbPriors& priors, Rng& rng) {
  const auto [mean, cov] = marginal_fixed_effects_conditional(state, spec, priors);
  state.beta = mvn_draw_cov(mean, cov, rng);
  update_random_effects(state, spec, rng);
}

/// psi | u ~ InverseWishart(scale + sum u_i u_i', df + N).
inline void update_effect_covariance(AugmentedState& state, const RmbPriors& priors, Rng& rng) {
  const int n = static_cast<int>(state.u.rows());
  const int q = static_cast<int>(state.u.cols());
  Eigen::MatrixXd scale = priors.psi_scale_for(q) + state.u.transpose() * state.u;
  scale = (0.5 * (scale + scale.transpose())).eval();
  state.psi = inverse_wishart_draw(priors.psi_df_for(q) + n, scale, rng);
}

/// AL scale given the latent weights:
/// sigma | rest ~ InvGamma(a0 + 3NT/2, b0 + sum r^2/(16 w) + sum w).
inline void update_scale(AugmentedState& state, const GrowthModelSpec& spec,
                         const RmbPriors& priors, Rng& rng) {
  const int n = static_cast<int>(state.y.rows());
  const int T = spec.occasions();
  double rate = priors.sigma_rate;
  rmb_detail::SmallVec effect(spec.effects());
  for (int i = 0; i < n; ++i) {
    effect = state.beta + state.u.row(i).transpose();
    for (int t = 0; t < T; ++t) {
      const double resid = state.y(i, t) - spec.loadings.row(t).dot(effect);
      rate += resid * resid / (16.0 * state.w(i, t)) + state.w(i, t);
    }
  }
  const double shape = priors.sigma_shape + 1.5 * n * T;
  state.sigma = inverse_gamma_draw(shape, rate, rng);
}

/// AL scale with the latent weights integrated out: the AL likelihood itself
/// is inverse-gamma conjugate,
///   sigma | y, beta, u ~ InvGamma(a0 + NT, b0 + sum |r_it| / 2).
/// Valid in the sweep because the weights are refreshed from their exact
/// conditional before any later block reads them; decouples the slow
/// sigma-w pair.
inline void update_scale_marginal(AugmentedState& state, const GrowthModelSpec& spec,
                                  const RmbPriors& priors, Rng& rng) {
  const int n = static_cast<int>(state.y.rows());
  const int T = spec.occasions();
  double rate = priors.sigma_rate;
  rmb_detail::SmallVec effect(spec.effects());
  for (int i = 0; i < n; ++i) {
    effect = state.beta + state.u.row(i).transpose();
    for (int t = 0; t < T; ++t)
      rate += 0.5 * std::abs(state.y(i, t) - spec.loadings.row(t).dot(effect));
  }
  const double shape = priors.sigma_shape + static_cast<double>(n) * T;
  state.sigma = inverse_gamma_draw(shape, rate, rng);
}

/// Ignorable imputation: masked cells are refreshed from their marginal
/// AL(mu_it, sigma, 1/2) given the subject's current latent line. The cell's
/// stale weight is resampled at the start of the next sweep before any block
/// reads it, which keeps the collapsed move valid.
inline void impute_missing_ignorable(AugmentedState& state, const LongitudinalDataset& data,
                                     const GrowthModelSpec& spec, Rng& rng) {
  rmb_detail::SmallVec effect(spec.effects());
  for (int i = 0; i < data.n(); ++i) {
    effect = state.beta + state.u.row(i).transpose();
    for (int t = 0; t < data.occasions(); ++t) {
      if (data.mask(i, t)) continue;
      state.y(i, t) = al_mixture_draw(spec.loadings.row(t).dot(effect), state.sigma, 0.5, rng);
    }
  }
}

/// A cell (i, t >= 2) enters the missingness likelihood only when its lag
/// occasion is observed, the discrete-time hazard convention for selection
/// models. Cells following a missing lag carry no direct information about
/// alpha and would couple the logit to their own imputations.
inline bool selection_cell_modeled(const LongitudinalDataset& data, int i, int t) {
  return t >= 1 && data.mask(i, t - 1);
}

/// Selection-model imputation: random-walk Metropolis on each masked cell.
/// The target is the marginal AL density times the cell's own missingness
/// term when that term is modeled (its lag is observed); the cell never
/// appears as a lag in a modeled term, being missing itself. Returns the
/// number of accepted moves; attempts equals the number of masked cells.
inline int mh_update_missing_mnar(AugmentedState& state, const LongitudinalDataset& data,
                                  const GrowthModelSpec& spec, Rng& rng, double step) {
  if (!state.alpha) throw std::logic_error("mh_update_missing_mnar: no selection parameters");
  const SelectionParams& alpha = *state.alpha;
  const int T = data.occasions();
  // Proposal spread tracks the AL standard deviation 2*sqrt(2)*sigma, so the
  // walk stays matched to the target at any scale; sigma is fixed during
  // this block, keeping the kernel symmetric.
  const double sd = step * 2.8284271247461903 * state.sigma;
  int accepted = 0;
  rmb_detail::SmallVec effect(spec.effects());
  for (int i = 0; i < data.n(); ++i) {
    effect = state.beta + state.u.row(i).transpose();
    for (int t = 0; t < T; ++t) {
      if (data.mask(i, t)) continue;
      const double mean_it = spec.loadings.row(t).dot(effect);
      const double current = state.y(i, t);
      const double proposal = current + sd * draw_normal(rng);

      double log_ratio = al_log_density(proposal, mean_it, state.sigma, 0.5) -
                         al_log_density(current, mean_it, state.sigma, 0.5);
      if (selection_cell_modeled(data, i, t)) {
        const double y_prev = state.y(i, t - 1);
        log_ratio += rmb_detail::log_bernoulli(
                         true, alpha.alpha0 + alpha.alpha1 * y_prev + alpha.alpha2 * proposal) -
                     rmb_detail::log_bernoulli(
                         true, alpha.alpha0 + alpha.alpha1 * y_prev + alpha.alpha2 * current);
      }
      if (std::log(draw_uniform(rng)) < log_ratio) {
        state.y(i, t) = proposal;
        ++accepted;
      }
    }
  }
  return accepted;
}

/// Independence refresh of the masked cells: proposals come from the AL
/// marginal itself, so the acceptance ratio reduces to the ratio of the
/// cell's selection factor. Complements the local random walk with global
/// jumps that decorrelate successive imputations.
inline int mh_refresh_missing_independence(AugmentedState& state,
                                           const LongitudinalDataset& data,
                                           const GrowthModelSpec& spec, Rng& rng) {
  if (!state.alpha) throw std::logic_error("mh_refresh_missing_independence: no selection");
  const SelectionParams& alpha = *state.alpha;
  int accepted = 0;
  rmb_detail::SmallVec effect(spec.effects());
  for (int i = 0; i < data.n(); ++i) {
    effect = state.beta + state.u.row(i).transpose();
    for (int t = 0; t < data.occasions(); ++t) {
      if (data.mask(i, t)) continue;
      const double mean_it = spec.loadings.row(t).dot(effect);
      const double proposal = al_mixture_draw(mean_it, state.sigma, 0.5, rng);
      double log_ratio = 0.0;
      if (selection_cell_modeled(data, i, t)) {
        const double y_prev = state.y(i, t - 1);
        log_ratio = rmb_detail::log_bernoulli(
                        true, alpha.alpha0 + alpha.alpha1 * y_prev + alpha.alpha2 * proposal) -
                    rmb_detail::log_bernoulli(true, alpha.alpha0 + alpha.alpha1 * y_prev +
                                                        alpha.alpha2 * state.y(i, t));
      }
      if (log_ratio >= 0.0 || std::log(draw_uniform(rng)) < log_ratio) {
        state.y(i, t) = proposal;
        ++accepted;
      }
    }
  }
  return accepted;
}

/// Joint random-walk Metropolis on (alpha0, alpha1, alpha2) against the
/// Bernoulli likelihood of every modeled missingness indicator (occasions
/// 2..T whose lag is observed, with current imputations standing in for
/// masked outcomes) and the normal prior. The proposal is N(0, P P') for a
/// caller-supplied lower factor P; an adapted covariance cures the strong
/// intercept/coefficient correlation of the logit posterior.
/// Mean of the observed outcomes; proposals for the selection coefficients
/// are made in coordinates where the covariates are centered at this value,
/// which removes most of the intercept/slope posterior correlation.
inline double selection_centering(const LongitudinalDataset& data) {
  double sum = 0.0;
  long count = 0;
  for (int i = 0; i < data.n(); ++i)
    for (int t = 0; t < data.occasions(); ++t)
      if (data.mask(i, t)) {
        sum += data.values(i, t);
        ++count;
      }
  return count > 0 ? sum / count : 0.0;
}

inline bool mh_update_alpha(AugmentedState& state, const LongitudinalDataset& data,
                            const RmbPriors& priors, Rng& rng,
                            const Eigen::Matrix3d& proposal_chol, double center) {
  if (!state.alpha) throw std::logic_error("mh_update_alpha: no selection parameters");
  const int T = data.occasions();
  const auto loglik = [&](const SelectionParams& a) {
    double ll = 0.0;
    for (int i = 0; i < data.n(); ++i)
      for (int t = 1; t < T; ++t) {
        if (!selection_cell_modeled(data, i, t)) continue;
        ll += rmb_detail::log_bernoulli(
            !data.mask(i, t),
            a.alpha0 + a.alpha1 * state.y(i, t - 1) + a.alpha2 * state.y(i, t));
      }
    return ll;
  };
  const auto logprior = [&](const SelectionParams& a) {
    return -0.5 *
           (a.alpha0 * a.alpha0 + a.alpha1 * a.alpha1 + a.alpha2 * a.alpha2) /
           priors.alpha_prior_var;
  };
  // Jump drawn in centered coordinates (a0 + (a1 + a2) c, a1, a2); the map
  // back to the original coordinates is linear and unit-Jacobian, so the
  // kernel stays a symmetric random walk.
  const Eigen::Vector3d jump =
      proposal_chol * Eigen::Vector3d(draw_normal(rng), draw_normal(rng), draw_normal(rng));
  SelectionParams prop = *state.alpha;
  prop.alpha0 += jump(0) - (jump(1) + jump(2)) * center;
  prop.alpha1 += jump(1);
  prop.alpha2 += jump(2);
  const double log_ratio =
      loglik(prop) + logprior(prop) - loglik(*state.alpha) - logprior(*state.alpha);
  if (std::log(draw_uniform(rng)) < log_ratio) {
    state.alpha = prop;
    return true;
  }
  return false;
}

inline bool mh_update_alpha(AugmentedState& state, const LongitudinalDataset& data,
                            const RmbPriors& priors, Rng& rng, double step) {
  return mh_update_alpha(state, data, priors, rng,
                         Eigen::Matrix3d(step * Eigen::Matrix3d::Identity()),
                         selection_centering(data));
}

/// Bernoulli log-likelihood of the modeled missingness indicators under the
/// given coefficients, with current imputations standing in for masked cells.
inline double selection_loglikelihood(const SelectionParams& a, const AugmentedState& state,
                                      const LongitudinalDataset& data) {
  double ll = 0.0;
  for (int i = 0; i < data.n(); ++i)
    for (int t = 1; t < data.occasions(); ++t) {
      if (!selection_cell_modeled(data, i, t)) continue;
      ll += rmb_detail::log_bernoulli(
          !data.mask(i, t), a.alpha0 + a.alpha1 * state.y(i, t - 1) + a.alpha2 * state.y(i, t));
    }
  return ll;
}

/// One full sweep in the order w, (beta, u), psi, sigma, missing y, alpha.
inline AugmentedState gibbs_step(AugmentedState state, const LongitudinalDataset& data,
                                 const GrowthModelSpec& spec, const RmbPriors& priors, Rng& rng,
                                 bool selection, double y_step = 0.5, double alpha_step = 0.5) {
  update_latent_weights(state, spec, rng);
  update_effects_block(state, spec, priors, rng);
  update_effect_covariance(state, priors, rng);
  update_scale_marginal(state, spec, priors, rng);
  if (selection) {
    mh_update_missing_mnar(state, data, spec, rng, y_step);
    mh_refresh_missing_independence(state, data, spec, rng);
    mh_update_alpha(state, data, priors, rng, alpha_step);
  } else {
    impute_missing_ignorable(state, data, spec, rng);
  }
  return state;
}

inline AugmentedState make_initial_state(const GrowthModelSpec& spec,
                                         const LongitudinalDataset& data, bool selection) {
  const int n = data.n();
  const int T = spec.occasions();
  const int q = spec.effects();
  if (q > 8) throw std::invalid_argument("sampler supports at most 8 random effects");

  AugmentedState state;
  Eigen::VectorXd means = Eigen::VectorXd::Zero(T), counts = Eigen::VectorXd::Zero(T);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < T; ++t)
      if (data.mask(i, t)) {
        means(t) += data.values(i, t);
        counts(t) += 1.0;
      }
  for (int t = 0; t < T; ++t) means(t) = counts(t) > 0 ? means(t) / counts(t) : 0.0;
  state.beta = (spec.loadings.transpose() * spec.loadings)
                   .ldlt()
                   .solve(spec.loadings.transpose() * means);
  state.u = Eigen::MatrixXd::Zero(n, q);
  state.psi = Eigen::MatrixXd::Identity(q, q);

  const Eigen::VectorXd line = spec.loadings * state.beta;
  double abs_sum = 0.0, n_obs = 0.0;
  state.y.resize(n, T);
  int missing_cells = 0, modeled_cells = 0;
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < T; ++t) {
      if (data.mask(i, t)) {
        state.y(i, t) = data.values(i, t);
        abs_sum += std::abs(data.values(i, t) - line(t));
        n_obs += 1.0;
      } else {
        state.y(i, t) = line(t);
      }
      if (t >= 1) {
        ++modeled_cells;
        missing_cells += data.mask(i, t) ? 0 : 1;
      }
    }
  }
  // AL maximum-likelihood scale for the residuals about the start line.
  state.sigma = std::max(0.05, n_obs > 0 ? abs_sum / (2.0 * n_obs) : 1.0);
  state.w = Eigen::MatrixXd::Constant(n, T, state.sigma);
  if (selection) {
    SelectionParams alpha;
    const double frac =
        modeled_cells > 0 ? static_cast<double>(missing_cells) / modeled_cells : 0.0;
    alpha.alpha0 = std::clamp(std::log(std::max(frac, 1e-3) / std::max(1.0 - frac, 1e-3)),
                              -4.0, 4.0);
    state.alpha = alpha;
  }
  return state;
}

// ---------------------------------------------------------------------------
// Chain driver and summaries.
// ---------------------------------------------------------------------------

struct ParamSummary {
  double median = 0.0;
  double mean = 0.0;
  double sd = 0.0;
  double q025 = 0.0;
  double q975 = 0.0;
  double geweke = 0.0;
};

using PosteriorSummary = std::map<std::string, ParamSummary>;

struct RmbFit {
  FitResult result;
  PosteriorSummary summary;
  std::vector<std::string> draw_names;
  Eigen::MatrixXd draws;  // retained iterations x parameters when keep_draws
};

namespace rmb_detail {

inline std::vector<std::string> draw_names(const GrowthModelSpec& spec, bool selection) {
  auto names = parameter_names(spec);
  names.pop_back();  // sigma2_e: the native draw is the AL scale
  names.push_back("sigma");
  if (selection) {
    names.push_back("alpha0");
    names.push_back("alpha1");
    names.push_back("alpha2");
  }
  return names;
}

inline ParamSummary summarize(const std::vector<double>& trace) {
  ParamSummary s;
  double sum = 0.0;
  for (double v : trace) sum += v;
  s.mean = sum / trace.size();
  double ss = 0.0;
  for (double v : trace) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / std::max<std::size_t>(1, trace.size() - 1));
  s.median = quantile(trace, 0.5);
  s.q025 = quantile(trace, 0.025);
  s.q975 = quantile(trace, 0.975);
  try {
    s.geweke = geweke_z(trace);
  } catch (const std::exception&) {
    s.geweke = std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

}  // namespace rmb_detail

/// Runs the chain, discards burn-in, and reports posterior medians as point
/// estimates. Convergence is judged by Geweke scores of the fixed effects,
/// the log-diagonal of psi, and log sigma, all required inside (-1.96, 1.96).
/// Selection updates draw from a second stream so that, with no missing
/// cells, the core chain is identical with and without the selection model.
inline RmbFit rmb_fit(const GrowthModelSpec& spec, const LongitudinalDataset& data,
                      const RmbPriors& priors, const ChainConfig& config, bool selection) {
  data.validate();
  spec.validate();
  const int n_iter = config.n_iter;
  const int burnin = config.burnin_resolved();
  const int q = spec.effects();

  Rng rng_core = make_rng(config.seed);
  Rng rng_sel = make_rng(config.seed ^ 0x5e1ec7100ff5e7ULL);

  AugmentedState state = make_initial_state(spec, data, selection);
  const auto names = rmb_detail::draw_names(spec, selection);
  const int n_params = static_cast<int>(names.size());
  Eigen::MatrixXd trace(n_iter, n_params);

  double y_step = config.mh_step;
  double alpha_scale = 1.0;
  Eigen::Matrix3d alpha_prop_chol = config.mh_step * Eigen::Matrix3d::Identity();
  const double alpha_center = selection ? selection_centering(data) : 0.0;
  // Running moments of the centered alpha draws; the proposal covariance is
  // adapted from them during burn-in (2.38^2/d scaling) and then frozen.
  Eigen::Vector3d alpha_mean = Eigen::Vector3d::Zero();
  Eigen::Matrix3d alpha_ssq = Eigen::Matrix3d::Zero();
  long alpha_count = 0;
  bool alpha_cov_installed = false;
  constexpr int alpha_repeats = 10;

  long y_acc = 0, y_att = 0, alpha_acc = 0, alpha_att = 0;
  long y_acc_total = 0, y_att_total = 0, alpha_acc_total = 0, alpha_att_total = 0;
  int masked_cells = 0;
  for (int i = 0; i < data.n(); ++i)
    for (int t = 0; t < data.occasions(); ++t) masked_cells += data.mask(i, t) ? 0 : 1;

  for (int iter = 0; iter < n_iter; ++iter) {
    update_latent_weights(state, spec, rng_core);
    update_effects_block(state, spec, priors, rng_core);
    update_effect_covariance(state, priors, rng_core);
    update_scale_marginal(state, spec, priors, rng_core);
    if (selection) {
      const int acc = mh_update_missing_mnar(state, data, spec, rng_sel, y_step);
      mh_refresh_missing_independence(state, data, spec, rng_sel);
      y_acc += acc;
      y_att += masked_cells;
      y_acc_total += acc;
      y_att_total += masked_cells;
      // Alpha block with interleaved imputation refreshes; the current-state
      // log-likelihood is cached across repeats and recomputed only when a
      // refresh changes the imputations.
      {
        const auto logprior = [&](const SelectionParams& a) {
          return -0.5 * (a.alpha0 * a.alpha0 + a.alpha1 * a.alpha1 + a.alpha2 * a.alpha2) /
                 priors.alpha_prior_var;
        };
        double cur_ll = selection_loglikelihood(*state.alpha, state, data);
        const Eigen::Matrix3d prop_chol = alpha_scale * alpha_prop_chol;
        for (int rep = 0; rep < alpha_repeats; ++rep) {
          const Eigen::Vector3d jump =
              prop_chol * Eigen::Vector3d(draw_normal(rng_sel), draw_normal(rng_sel),
                                          draw_normal(rng_sel));
          SelectionParams prop = *state.alpha;
          prop.alpha0 += jump(0) - (jump(1) + jump(2)) * alpha_center;
          prop.alpha1 += jump(1);
          prop.alpha2 += jump(2);
          const double prop_ll = selection_loglikelihood(prop, state, data);
          const double log_ratio =
              prop_ll + logprior(prop) - cur_ll - logprior(*state.alpha);
          bool a = false;
          if (std::log(draw_uniform(rng_sel)) < log_ratio) {
            state.alpha = prop;
            cur_ll = prop_ll;
            a = true;
          }
          alpha_acc += a ? 1 : 0;
          alpha_att += 1;
          alpha_acc_total += a ? 1 : 0;
          alpha_att_total += 1;
          if (rep % 2 == 1 && rep + 1 < alpha_repeats) {
            mh_refresh_missing_independence(state, data, spec, rng_sel);
            cur_ll = selection_loglikelihood(*state.alpha, state, data);
          }
        }
      }
      // Covariance accumulation skips the early transient so the adapted
      // proposal reflects the stationary spread, not the approach to it.
      if (config.adapt && iter >= burnin / 3 && iter < burnin) {
        ++alpha_count;
        const Eigen::Vector3d av(
            state.alpha->alpha0 + (state.alpha->alpha1 + state.alpha->alpha2) * alpha_center,
            state.alpha->alpha1, state.alpha->alpha2);
        const Eigen::Vector3d delta = av - alpha_mean;
        alpha_mean += delta / static_cast<double>(alpha_count);
        alpha_ssq += delta * (av - alpha_mean).transpose();
      }
    } else if (masked_cells > 0) {
      impute_missing_ignorable(state, data, spec, rng_core);
    }

    // Adapt random-walk scales toward a 20-50% acceptance band, burn-in only.
    if (config.adapt && selection && iter < burnin && (iter + 1) % 100 == 0) {
      if (y_att > 0) {
        const double rate = static_cast<double>(y_acc) / y_att;
        if (rate < 0.2) y_step *= 0.7;
        if (rate > 0.5) y_step *= 1.4;
      }
      if (alpha_att > 0) {
        const double rate = static_cast<double>(alpha_acc) / alpha_att;
        if (rate < 0.2) alpha_scale *= 0.7;
        if (rate > 0.5) alpha_scale *= 1.4;
      }
      y_acc = y_att = alpha_acc = alpha_att = 0;
      if (alpha_count >= 500) {
        Eigen::Matrix3d cov = alpha_ssq / static_cast<double>(alpha_count - 1);
        cov = (2.38 * 2.38 / 3.0) * cov + 1e-8 * Eigen::Matrix3d::Identity();
        const Eigen::LLT<Eigen::Matrix3d> llt(cov);
        if (llt.info() == Eigen::Success) {
          alpha_prop_chol = llt.matrixL();
          if (!alpha_cov_installed) alpha_scale = 1.0;  // the band tuner owns it afterwards
          alpha_cov_installed = true;
        }
      }
    }

    int k = 0;
    for (int j = 0; j < q; ++j) trace(iter, k++) = state.beta(j);
    for (int j = 0; j < q; ++j)
      for (int i2 = 0; i2 <= j; ++i2) trace(iter, k++) = state.psi(j, i2);
    trace(iter, k++) = state.sigma;
    if (selection) {
      trace(iter, k++) = state.alpha->alpha0;
      trace(iter, k++) = state.alpha->alpha1;
      trace(iter, k++) = state.alpha->alpha2;
    }
  }

  const int kept = n_iter - burnin;
  RmbFit fit;
  fit.draw_names = names;
  if (config.keep_draws) fit.draws = trace.bottomRows(kept);

  std::vector<double> column(kept);
  for (int j = 0; j < n_params; ++j) {
    for (int i = 0; i < kept; ++i) column[i] = trace(burnin + i, j);
    fit.summary[names[j]] = rmb_detail::summarize(column);
  }
  // Derived error-variance parameter: Var AL(mu, sigma, 1/2) = 8 sigma^2.
  {
    for (int i = 0; i < kept; ++i) {
      const double s = trace(burnin + i, q + q * (q + 1) / 2);
      column[i] = 8.0 * s * s;
    }
    fit.summary["sigma2_e"] = rmb_detail::summarize(column);
  }

  FitResult& res = fit.result;
  res.method = selection ? "rmb-selection" : "rmb";
  res.estimates.beta.resize(q);
  for (int j = 0; j < q; ++j) res.estimates.beta(j) = fit.summary[names[j]].median;
  res.estimates.psi.resize(q, q);
  {
    int k = q;
    for (int j = 0; j < q; ++j)
      for (int i2 = 0; i2 <= j; ++i2) {
        const double m = fit.summary[names[k++]].median;
        res.estimates.psi(j, i2) = m;
        res.estimates.psi(i2, j) = m;
      }
  }
  res.estimates.sigma2_e = fit.summary["sigma2_e"].median;
  for (const auto& [name, s] : fit.summary) {
    res.ci95[name] = {s.q025, s.q975};
    res.std_error[name] = s.sd;
  }

  // Convergence: Geweke on beta, log-diagonal of psi, log sigma.
  bool converged = true;
  const auto check = [&](const std::string& key, const std::vector<double>& tr) {
    double z = std::numeric_limits<double>::quiet_NaN();
    try {
      z = geweke_z(tr);
    } catch (const std::exception&) {
    }
    res.diagnostics["geweke_" + key] = z;
    if (!(std::abs(z) < 1.96)) converged = false;
  };
  {
    std::vector<double> tr(kept);
    int col = 0;
    for (int j = 0; j < q; ++j, ++col) {
      for (int i = 0; i < kept; ++i) tr[i] = trace(burnin + i, col);
      check(names[col], tr);
    }
    int k = q;
    for (int j = 0; j < q; ++j)
      for (int i2 = 0; i2 <= j; ++i2, ++k)
        if (i2 == j) {
          for (int i = 0; i < kept; ++i) tr[i] = std::log(std::max(1e-300, trace(burnin + i, k)));
          check("log_" + names[k], tr);
        }
    const int sig_col = q + q * (q + 1) / 2;
    for (int i = 0; i < kept; ++i) tr[i] = std::log(std::max(1e-300, trace(burnin + i, sig_col)));
    check("log_sigma", tr);
  }
  res.converged = converged;
  res.diagnostics["n_iter"] = n_iter;
  res.diagnostics["burnin"] = burnin;
  res.diagnostics["sigma_al_median"] = fit.summary["sigma"].median;
  if (selection) {
    res.diagnostics["accept_missing"] =
        y_att_total > 0 ? static_cast<double>(y_acc_total) / y_att_total : 1.0;
    res.diagnostics["accept_alpha"] =
        alpha_att_total > 0 ? static_cast<double>(alpha_acc_total) / alpha_att_total : 1.0;
    res.diagnostics["mh_step_missing"] = y_step;
    res.diagnostics["mh_step_alpha"] = alpha_scale * alpha_prop_chol.diagonal().mean();
  }
  return fit;
}

}  // namespace gcm
