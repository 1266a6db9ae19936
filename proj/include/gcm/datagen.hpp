#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gcm/distributions.hpp"
#include "gcm/model.hpp"
#include "gcm/rng.hpp"
#include "gcm/types.hpp"

namespace gcm {

// ---------------------------------------------------------------------------
// Error distributions. Each family is moment-matched to mean 0 and variance
// sigma2_e except the contaminated normal, whose outlier component keeps its
// shifted mean (the contamination is the point).
// ---------------------------------------------------------------------------

enum class ErrorKind { Normal, StudentT5, NormalWithOutliers, LogNormal };

inline std::string to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Normal: return "normal";
    case ErrorKind::StudentT5: return "t5";
    case ErrorKind::NormalWithOutliers: return "outlier";
    case ErrorKind::LogNormal: return "lognormal";
  }
  return "unknown";
}

inline ErrorKind error_kind_from_string(const std::string& s) {
  if (s == "normal") return ErrorKind::Normal;
  if (s == "t5") return ErrorKind::StudentT5;
  if (s == "outlier") return ErrorKind::NormalWithOutliers;
  if (s == "lognormal") return ErrorKind::LogNormal;
  throw std::invalid_argument("unknown error distribution '" + s + "'");
}

struct ErrorDistribution {
  ErrorKind kind = ErrorKind::Normal;
  double outlier_rate = 0.0;
  double outlier_shift = 5.0;

  static ErrorDistribution normal() { return {ErrorKind::Normal, 0.0, 5.0}; }
  static ErrorDistribution student_t5() { return {ErrorKind::StudentT5, 0.0, 5.0}; }
  static ErrorDistribution normal_with_outliers(double rate = 0.05, double shift = 5.0) {
    return {ErrorKind::NormalWithOutliers, rate, shift};
  }
  static ErrorDistribution log_normal() { return {ErrorKind::LogNormal, 0.0, 5.0}; }
  static ErrorDistribution from_kind(ErrorKind k) {
    return k == ErrorKind::NormalWithOutliers ? normal_with_outliers()
                                              : ErrorDistribution{k, 0.0, 5.0};
  }

  void validate() const {
    if (!(outlier_rate >= 0.0 && outlier_rate < 1.0))
      throw std::invalid_argument("outlier_rate must lie in [0,1)");
    if (!std::isfinite(outlier_shift)) throw std::invalid_argument("outlier_shift must be finite");
  }
};

enum class Mechanism { None, MAR, MNAR };

inline std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::None: return "none";
    case Mechanism::MAR: return "MAR";
    case Mechanism::MNAR: return "MNAR";
  }
  return "unknown";
}

inline Mechanism mechanism_from_string(const std::string& s) {
  if (s == "none" || s == "None" || s.empty()) return Mechanism::None;
  if (s == "MAR" || s == "mar") return Mechanism::MAR;
  if (s == "MNAR" || s == "mnar") return Mechanism::MNAR;
  throw std::invalid_argument("unknown mechanism '" + s + "'");
}

struct MissingSpec {
  Mechanism mechanism = Mechanism::None;
  double rate = 0.0;      // target fraction of all cells missing
  double r = 0.8;         // auxiliary-variable regression coefficient (MNAR)

  void validate() const {
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("missing rate must be in [0,1)");
    if (!std::isfinite(r)) throw std::invalid_argument("r must be finite");
  }
};

/// A generated dataset plus the ground truth needed for simulation metrics.
struct SimulatedDataset {
  LongitudinalDataset data;
  Eigen::MatrixXd true_effects;     // N x q subject effects b_i
  Eigen::MatrixXd complete_values;  // pre-deletion outcome matrix
};

// ---------------------------------------------------------------------------
// Generation.
// ---------------------------------------------------------------------------

/// N draws of b_i = beta + u_i with u_i ~ MVN(0, psi).
inline Eigen::MatrixXd gen_random_effects(const ParameterSet& params, int n, Rng& rng) {
  params.validate();
  const int q = static_cast<int>(params.beta.size());
  Eigen::LLT<Eigen::MatrixXd> llt(params.psi);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("gen_random_effects: Cholesky of psi failed");
  const Eigen::MatrixXd l = llt.matrixL();
  Eigen::MatrixXd effects(n, q);
  Eigen::VectorXd z(q);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < q; ++j) z(j) = draw_normal(rng);
    effects.row(i) = (params.beta + l * z).transpose();
  }
  return effects;
}

inline double draw_error(const ErrorDistribution& dist, double sigma2_e, Rng& rng) {
  const double sd = std::sqrt(sigma2_e);
  switch (dist.kind) {
    case ErrorKind::Normal:
      return draw_normal(rng, 0.0, sd);
    case ErrorKind::StudentT5:
      // t(5) has variance 5/3; rescale to variance sigma2_e.
      return draw_student_t(rng, 5.0) * std::sqrt(3.0 * sigma2_e / 5.0);
    case ErrorKind::NormalWithOutliers:
      // Observation-level contamination: shifted component, same variance.
      if (draw_uniform(rng) < dist.outlier_rate)
        return draw_normal(rng, dist.outlier_shift, sd);
      return draw_normal(rng, 0.0, sd);
    case ErrorKind::LogNormal: {
      // LN(0,1) centered at its mean exp(1/2) and scaled to variance sigma2_e.
      constexpr double ln_mean = 1.6487212707001282;           // exp(0.5)
      const double ln_sd = std::sqrt((M_E - 1.0) * M_E);       // sqrt((e-1)e)
      return (draw_lognormal(rng) - ln_mean) / ln_sd * sd;
    }
  }
  throw std::logic_error("unreachable");
}

inline Eigen::MatrixXd gen_errors(const ErrorDistribution& dist, int n, int occasions,
                                  double sigma2_e, Rng& rng) {
  dist.validate();
  if (!(sigma2_e > 0.0)) throw std::invalid_argument("sigma2_e must be positive");
  Eigen::MatrixXd e(n, occasions);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < occasions; ++t) e(i, t) = draw_error(dist, sigma2_e, rng);
  return e;
}

/// Complete trajectories: values = loadings * b_i + e_i, all cells observed.
inline SimulatedDataset gen_complete(const GrowthModelSpec& spec, const ParameterSet& params,
                                     const ErrorDistribution& dist, int n, Rng& rng) {
  spec.validate();
  SimulatedDataset sim;
  sim.true_effects = gen_random_effects(params, n, rng);
  const Eigen::MatrixXd errors = gen_errors(dist, n, spec.occasions(), params.sigma2_e, rng);
  sim.complete_values = sim.true_effects * spec.loadings.transpose() + errors;
  sim.data.values = sim.complete_values;
  sim.data.mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(
      n, spec.occasions(), true);
  sim.data.subject_ids.reserve(n);
  for (int i = 0; i < n; ++i) sim.data.subject_ids.push_back("s" + std::to_string(i + 1));
  return sim;
}

// ---------------------------------------------------------------------------
// Missingness mechanisms. Both target marginal missing rates of
// 2 (t-1) mr / (T-1) at occasion t = 2..T, which average to mr over the whole
// matrix; occasion 1 is never missing.
// ---------------------------------------------------------------------------

/// Unconditional percentile ladder q_t = 1 - [2t/(T-1)] mr for t = 1..T-1.
inline std::vector<double> mar_percentile_levels(double mr, int occasions) {
  std::vector<double> levels;
  for (int t = 1; t < occasions; ++t)
    levels.push_back(1.0 - (2.0 * t / (occasions - 1)) * mr);
  return levels;
}

namespace datagen_detail {

/// Empirical upper quantile: the order statistic at ceil(m * level).
inline double empirical_quantile(std::vector<double> values, double level) {
  const auto m = values.size();
  std::size_t idx = static_cast<std::size_t>(std::ceil(level * static_cast<double>(m)));
  idx = std::min(std::max<std::size_t>(idx, 1), m);
  std::nth_element(values.begin(), values.begin() + (idx - 1), values.end());
  return values[idx - 1];
}

}  // namespace datagen_detail

/// Sequential threshold-based dropout: a subject whose observed y_t exceeds
/// the occasion-t cutoff loses every later occasion. Cutoffs are empirical
/// quantiles among subjects still observed at t, at the survivor-conditional
/// level q_t / q_{t-1}, which realizes the unconditional ladder q_t exactly
/// and keeps the matrix-wide missing fraction at mr.
inline SimulatedDataset impose_mar(SimulatedDataset sim, double mr, Rng& /*rng*/) {
  if (!(mr >= 0.0)) throw std::invalid_argument("mr must be nonnegative");
  if (mr == 0.0) return sim;
  const int T = sim.data.occasions();
  const int n = sim.data.n();
  const auto levels = mar_percentile_levels(mr, T);
  for (double q : levels)
    if (q <= 0.0) throw std::invalid_argument("mr too large: percentile level fell to zero");

  std::vector<bool> dropped(n, false);
  double prev_level = 1.0;
  for (int t = 0; t + 1 < T; ++t) {
    const double conditional_level = levels[t] / prev_level;
    prev_level = levels[t];
    std::vector<double> observed;
    observed.reserve(n);
    for (int i = 0; i < n; ++i)
      if (!dropped[i]) observed.push_back(sim.data.values(i, t));
    if (observed.size() < 2) break;
    const double cutoff = datagen_detail::empirical_quantile(observed, conditional_level);
    for (int i = 0; i < n; ++i) {
      if (dropped[i]) continue;
      if (sim.data.values(i, t) > cutoff) {
        dropped[i] = true;
        for (int s = t + 1; s < T; ++s) sim.data.mask(i, s) = false;
      }
    }
  }
  return sim;
}

/// Latent-slope-driven missingness: Aux_i = r u_{i,slope} + eps_i with
/// eps_i ~ N(0,1); occasion t is missing when Aux_i exceeds the analytic
/// quantile of its marginal N(0, r^2 psi_ss + 1) at level q_{t-1}. The
/// auxiliary variable is stored for inspection but never used by estimators.
inline SimulatedDataset impose_mnar(SimulatedDataset sim, const ParameterSet& params, double r,
                                    double mr, Rng& rng) {
  if (!(mr >= 0.0)) throw std::invalid_argument("mr must be nonnegative");
  const int T = sim.data.occasions();
  const int n = sim.data.n();
  const int q = static_cast<int>(params.beta.size());
  if (q < 2) throw std::invalid_argument("MNAR mechanism needs a slope effect (q >= 2)");
  const int slope = 1;

  Eigen::VectorXd aux(n);
  for (int i = 0; i < n; ++i) {
    const double u_slope = sim.true_effects(i, slope) - params.beta(slope);
    aux(i) = r * u_slope + draw_normal(rng);
  }
  sim.data.aux = aux;
  if (mr == 0.0) return sim;

  const auto levels = mar_percentile_levels(mr, T);
  for (double lvl : levels)
    if (lvl <= 0.0) throw std::invalid_argument("mr too large: percentile level fell to zero");
  const double aux_sd = std::sqrt(r * r * params.psi(slope, slope) + 1.0);
  for (int t = 1; t < T; ++t) {
    const double threshold = normal_quantile(levels[t - 1], 0.0, aux_sd);
    for (int i = 0; i < n; ++i)
      if (aux(i) > threshold) sim.data.mask(i, t) = false;
  }
  return sim;
}

inline SimulatedDataset impose_missingness(SimulatedDataset sim, const MissingSpec& spec,
                                           const ParameterSet& params, Rng& rng) {
  spec.validate();
  switch (spec.mechanism) {
    case Mechanism::None: return sim;
    case Mechanism::MAR: return impose_mar(std::move(sim), spec.rate, rng);
    case Mechanism::MNAR: return impose_mnar(std::move(sim), params, spec.r, spec.rate, rng);
  }
  throw std::logic_error("unreachable");
}

}  // namespace gcm
