#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "gcm/rng.hpp"

namespace gcm {

// ---------------------------------------------------------------------------
// Asymmetric Laplace. Parameterized so the density is
//   f(y; mu, sigma, tau) = tau (1 - tau) / sigma * exp(-rho_tau((y - mu) / sigma)),
// with rho_tau(u) = u (tau - 1{u < 0}). At tau = 0.5 this is a Laplace with
// scale 2 sigma, mode density 0.25 / sigma, and median mu.
// ---------------------------------------------------------------------------

inline void check_al_args(double sigma, double tau) {
  if (!(sigma > 0.0)) throw std::invalid_argument("AL scale must be positive");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("AL tau must lie in (0,1)");
}

inline double al_log_density(double y, double mu, double sigma, double tau) {
  check_al_args(sigma, tau);
  const double u = (y - mu) / sigma;
  const double rho = u * (tau - (u < 0.0 ? 1.0 : 0.0));
  return std::log(tau * (1.0 - tau) / sigma) - rho;
}

inline double al_cdf(double y, double mu, double sigma, double tau) {
  check_al_args(sigma, tau);
  const double u = (y - mu) / sigma;
  if (u < 0.0) return tau * std::exp((1.0 - tau) * u);
  return 1.0 - (1.0 - tau) * std::exp(-tau * u);
}

/// Draws from AL(mu, sigma, tau) through its exponential-normal mixture:
/// with W ~ Exp(mean sigma) and Z ~ N(0,1),
///   y = mu + zeta W + eta sqrt(sigma W) Z,
/// zeta = (1 - 2 tau) / (tau (1 - tau)), eta^2 = 2 / (tau (1 - tau)).
/// At tau = 0.5 the constants reduce to zeta = 0, eta^2 = 8.
inline double al_mixture_draw(double mu, double sigma, double tau, Rng& rng) {
  check_al_args(sigma, tau);
  const double zeta = (1.0 - 2.0 * tau) / (tau * (1.0 - tau));
  const double eta = std::sqrt(2.0 / (tau * (1.0 - tau)));
  const double w = draw_exponential(rng, sigma);
  const double z = draw_normal(rng);
  return mu + zeta * w + eta * std::sqrt(sigma * w) * z;
}

// ---------------------------------------------------------------------------
// Inverse Gaussian and the lambda = 1/2 generalized inverse Gaussian, which
// is the latent-weight full conditional implied by the mixture above.
// ---------------------------------------------------------------------------

/// Michael-Schucany-Haas sampler for InverseGaussian(mean, shape).
inline double inverse_gaussian_draw(double mean, double shape, Rng& rng) {
  if (!(mean > 0.0) || !(shape > 0.0))
    throw std::invalid_argument("inverse Gaussian needs positive mean and shape");
  const double nu = draw_normal(rng);
  const double y = nu * nu;
  const double x = mean + mean * mean * y / (2.0 * shape) -
                   (mean / (2.0 * shape)) * std::sqrt(4.0 * mean * shape * y + mean * mean * y * y);
  if (draw_uniform(rng) <= mean / (mean + x)) return x;
  return mean * mean / x;
}

/// GIG(lambda = 1/2, chi, psi) has density proportional to
///   x^{-1/2} exp(-(chi / x + psi x) / 2),  x > 0.
/// Its reciprocal is GIG(-1/2, psi, chi) = InverseGaussian(sqrt(psi/chi), psi),
/// which gives an exact draw. chi -> 0 degenerates to Gamma(1/2, 2/psi).
inline double gig_half_draw(double chi, double psi, Rng& rng) {
  if (!(psi > 0.0) || chi < 0.0) throw std::invalid_argument("invalid GIG parameters");
  // Clamp both tails: draws stay in a range where downstream arithmetic
  // (residual^2 / weight, weight * scale) cannot overflow. The bounds are
  // far outside anything a finite dataset produces.
  constexpr double floor = 1e-12;
  constexpr double ceiling = 1e100;
  if (!std::isfinite(chi) || chi > ceiling) chi = ceiling;
  if (chi < 1e-100) {
    return std::clamp(draw_gamma(rng, 0.5, 2.0 / psi), floor, ceiling);
  }
  const double v = inverse_gaussian_draw(std::sqrt(psi / chi), psi, rng);
  double x = 1.0 / v;
  if (!(x > floor) || !std::isfinite(x)) {
    // Extreme residuals can underflow the reciprocal; resample once, then clamp.
    x = 1.0 / inverse_gaussian_draw(std::sqrt(psi / chi), psi, rng);
    if (!(x > floor) || !std::isfinite(x)) x = floor;
  }
  return std::min(x, ceiling);
}

// ---------------------------------------------------------------------------
// Multivariate normal / Wishart machinery for the conjugate updates.
// ---------------------------------------------------------------------------

inline Eigen::VectorXd mvn_draw(const Eigen::VectorXd& mean, const Eigen::MatrixXd& chol_lower,
                                Rng& rng) {
  Eigen::VectorXd z(mean.size());
  for (int i = 0; i < z.size(); ++i) z(i) = draw_normal(rng);
  return mean + chol_lower * z;
}

inline Eigen::VectorXd mvn_draw_cov(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                    Rng& rng) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("mvn_draw_cov: covariance not positive definite");
  return mvn_draw(mean, llt.matrixL(), rng);
}

/// Bartlett-decomposition draw from Wishart(df, scale), df > dim - 1.
inline Eigen::MatrixXd wishart_draw(double df, const Eigen::MatrixXd& scale, Rng& rng) {
  const int p = static_cast<int>(scale.rows());
  if (!(df > p - 1)) throw std::invalid_argument("wishart df too small");
  Eigen::LLT<Eigen::MatrixXd> llt(scale);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("wishart_draw: scale not positive definite");
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  for (int i = 0; i < p; ++i) {
    a(i, i) = std::sqrt(draw_chi_squared(rng, df - i));
    for (int j = 0; j < i; ++j) a(i, j) = draw_normal(rng);
  }
  const Eigen::MatrixXd la = llt.matrixL() * a;
  return la * la.transpose();
}

/// InverseWishart(scale, df): invert a Wishart(df, scale^{-1}) draw.
inline Eigen::MatrixXd inverse_wishart_draw(double df, const Eigen::MatrixXd& scale, Rng& rng) {
  const Eigen::MatrixXd w = wishart_draw(df, scale.inverse(), rng);
  return w.inverse();
}

/// 1/X with X ~ Gamma(shape, rate), i.e. InverseGamma(shape, rate), clamped
/// to a range that keeps dependent variance terms representable.
inline double inverse_gamma_draw(double shape, double rate, Rng& rng) {
  if (!std::isfinite(rate)) rate = 1e100;
  const double g = draw_gamma(rng, shape, 1.0 / rate);
  if (!(g > 0.0)) return 1e100;
  return std::clamp(1.0 / g, 1e-100, 1e100);
}

// ---------------------------------------------------------------------------
// Quantile helpers.
// ---------------------------------------------------------------------------

inline double normal_quantile(double p, double mean = 0.0, double sd = 1.0) {
  boost::math::normal_distribution<double> dist(mean, sd);
  return boost::math::quantile(dist, p);
}

inline double chi_squared_quantile(double p, double df) {
  boost::math::chi_squared_distribution<double> dist(df);
  return boost::math::quantile(dist, p);
}

inline double chi_squared_cdf(double x, double df) {
  boost::math::chi_squared_distribution<double> dist(df);
  return boost::math::cdf(dist, x);
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace gcm
