#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace gcm {

namespace geweke_detail {

inline double mean_of(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

}  // namespace geweke_detail

/// Spectral density at frequency zero, estimated by fitting an AR model with
/// Yule-Walker (Levinson-Durbin) and AIC order selection:
///   S(0) = sigma_p^2 / (1 - sum phi_j)^2.
/// This is the long-run variance used for MCMC standard errors; order 0
/// reduces to the sample variance.
inline double spectrum0(std::span<const double> x) {
  const int n = static_cast<int>(x.size());
  if (n < 5) throw std::invalid_argument("spectrum0: series too short");
  const double mean = geweke_detail::mean_of(x);

  const int max_order =
      std::min({n - 2, static_cast<int>(10.0 * std::log10(static_cast<double>(n))), 40});
  std::vector<double> acov(max_order + 1, 0.0);
  for (int k = 0; k <= max_order; ++k) {
    double s = 0.0;
    for (int i = k; i < n; ++i) s += (x[i] - mean) * (x[i - k] - mean);
    acov[k] = s / n;
  }
  if (!(acov[0] > 0.0)) throw std::runtime_error("spectrum0: zero-variance series");

  // Levinson-Durbin recursion, tracking AIC over orders 0..max_order.
  std::vector<double> phi(max_order + 1, 0.0), prev(max_order + 1, 0.0);
  double v = acov[0];
  double best_aic = n * std::log(v);
  int best_order = 0;
  double best_v = v;
  std::vector<double> best_phi;
  for (int p = 1; p <= max_order; ++p) {
    double num = acov[p];
    for (int j = 1; j < p; ++j) num -= prev[j] * acov[p - j];
    const double k = num / v;
    phi[p] = k;
    for (int j = 1; j < p; ++j) phi[j] = prev[j] - k * prev[p - j];
    v *= (1.0 - k * k);
    if (!(v > 0.0)) break;
    const double aic = n * std::log(v) + 2.0 * p;
    if (aic < best_aic) {
      best_aic = aic;
      best_order = p;
      best_v = v;
      best_phi.assign(phi.begin() + 1, phi.begin() + p + 1);
    }
    std::copy(phi.begin(), phi.begin() + p + 1, prev.begin());
  }

  if (best_order == 0) return acov[0];
  double phi_sum = 0.0;
  for (double c : best_phi) phi_sum += c;
  const double denom = 1.0 - phi_sum;
  if (std::abs(denom) < 1e-8 || !(best_v > 0.0)) return acov[0];
  return best_v / (denom * denom);
}

/// Geweke convergence z-score: difference of early-window and late-window
/// means standardized by their spectral standard errors. A constant window
/// raises an error rather than returning a spurious score.
inline double geweke_z(std::span<const double> chain, double first_frac = 0.1,
                       double last_frac = 0.5) {
  const int n = static_cast<int>(chain.size());
  if (n < 100) throw std::invalid_argument("geweke_z: chain shorter than 100");
  if (!(first_frac > 0.0 && last_frac > 0.0 && first_frac + last_frac <= 1.0))
    throw std::invalid_argument("geweke_z: invalid window fractions");
  const int n1 = std::max(5, static_cast<int>(first_frac * n));
  const int n2 = std::max(5, static_cast<int>(last_frac * n));
  const auto first = chain.subspan(0, n1);
  const auto last = chain.subspan(n - n2, n2);

  const double m1 = geweke_detail::mean_of(first);
  const double m2 = geweke_detail::mean_of(last);
  const double s1 = spectrum0(first);
  const double s2 = spectrum0(last);
  const double se2 = s1 / n1 + s2 / n2;
  if (!(se2 > 0.0)) throw std::runtime_error("geweke_z: zero-variance windows");
  return (m1 - m2) / std::sqrt(se2);
}

inline double geweke_z(const std::vector<double>& chain, double first_frac = 0.1,
                       double last_frac = 0.5) {
  return geweke_z(std::span<const double>(chain.data(), chain.size()), first_frac, last_frac);
}

/// Empirical quantile with linear interpolation (type-7).
inline double quantile(std::vector<double> sorted_or_not, double p) {
  if (sorted_or_not.empty()) throw std::invalid_argument("quantile of empty sample");
  std::sort(sorted_or_not.begin(), sorted_or_not.end());
  const double h = p * (static_cast<double>(sorted_or_not.size()) - 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted_or_not.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return (1.0 - frac) * sorted_or_not[lo] + frac * sorted_or_not[hi];
}

}  // namespace gcm
