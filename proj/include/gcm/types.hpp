#pragma once

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace gcm {

/// Raised when an input file or dataset fails validation (as opposed to a
/// numerical failure during estimation).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Time structure of a linear latent-trajectory model: a T x q loading matrix
/// mapping q random effects onto T measurement occasions.
struct GrowthModelSpec {
  Eigen::MatrixXd loadings;

  int occasions() const { return static_cast<int>(loadings.rows()); }
  int effects() const { return static_cast<int>(loadings.cols()); }

  /// Intercept/slope loadings [1, t] for t = 0..occasions-1.
  static GrowthModelSpec linear(int occasions) {
    GrowthModelSpec spec;
    spec.loadings.resize(occasions, 2);
    for (int t = 0; t < occasions; ++t) {
      spec.loadings(t, 0) = 1.0;
      spec.loadings(t, 1) = static_cast<double>(t);
    }
    spec.validate();
    return spec;
  }

  void validate() const {
    if (occasions() < 2) throw std::invalid_argument("model spec needs at least 2 occasions");
    if (effects() < 1) throw std::invalid_argument("model spec needs at least 1 random effect");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(loadings);
    if (qr.rank() < effects())
      throw std::invalid_argument("loading matrix must have full column rank");
  }
};

/// Fixed effects, random-effect covariance, and error variance.
struct ParameterSet {
  Eigen::VectorXd beta;
  Eigen::MatrixXd psi;
  double sigma2_e = 1.0;

  void validate() const {
    const auto q = beta.size();
    if (psi.rows() != q || psi.cols() != q)
      throw std::invalid_argument("psi dimensions do not match beta");
    if (!psi.isApprox(psi.transpose(), 1e-10))
      throw std::invalid_argument("psi must be symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(psi);
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("psi must be positive definite");
    if (!(sigma2_e > 0.0)) throw std::invalid_argument("sigma2_e must be positive");
  }
};

/// N x T outcome matrix with an observation mask. Missingness is represented
/// by the mask alone; cells with mask == false are never read by estimators.
struct LongitudinalDataset {
  Eigen::MatrixXd values;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask;
  std::vector<std::string> subject_ids;
  /// Generation-side auxiliary variable; never exposed to estimators.
  std::optional<Eigen::VectorXd> aux;

  int n() const { return static_cast<int>(values.rows()); }
  int occasions() const { return static_cast<int>(values.cols()); }

  int observed_count(int subject) const {
    int c = 0;
    for (int t = 0; t < occasions(); ++t) c += mask(subject, t) ? 1 : 0;
    return c;
  }

  Eigen::VectorXd occasion_missing_rates() const {
    Eigen::VectorXd rates(occasions());
    for (int t = 0; t < occasions(); ++t) {
      int miss = 0;
      for (int i = 0; i < n(); ++i) miss += mask(i, t) ? 0 : 1;
      rates(t) = n() > 0 ? static_cast<double>(miss) / n() : 0.0;
    }
    return rates;
  }

  void validate() const {
    if (mask.rows() != values.rows() || mask.cols() != values.cols())
      throw DataError("mask and values dimensions disagree");
    if (!subject_ids.empty() && static_cast<int>(subject_ids.size()) != n())
      throw DataError("subject id count does not match row count");
    if (aux && aux->size() != n()) throw DataError("aux length does not match row count");
    for (int i = 0; i < n(); ++i)
      if (observed_count(i) == 0)
        throw DataError("subject " + (subject_ids.empty() ? std::to_string(i) : subject_ids[i]) +
                        " has no observed occasions");
  }
};

/// Point estimates plus uncertainty and diagnostics from one estimator run.
/// When converged is false the estimates are still populated, just flagged.
struct FitResult {
  std::string method;
  ParameterSet estimates;
  bool converged = false;
  std::map<std::string, double> std_error;
  std::map<std::string, std::array<double, 2>> ci95;
  std::map<std::string, double> diagnostics;
};

/// Canonical parameter names, used for result maps and file columns.
/// q == 2 uses the intercept/slope (L/S) convention.
inline std::vector<std::string> parameter_names(const GrowthModelSpec& spec) {
  const int q = spec.effects();
  std::vector<std::string> names;
  if (q == 2) {
    names = {"beta_L", "beta_S", "psi_LL", "psi_LS", "psi_SS"};
  } else {
    for (int j = 0; j < q; ++j) names.push_back("beta_" + std::to_string(j));
    for (int j = 0; j < q; ++j)
      for (int k = 0; k <= j; ++k)
        names.push_back("psi_" + std::to_string(j) + "_" + std::to_string(k));
  }
  names.push_back("sigma2_e");
  return names;
}

/// Flattens a ParameterSet in the parameter_names order
/// (beta, lower-triangular psi by row, sigma2_e).
inline Eigen::VectorXd flatten_parameters(const ParameterSet& params) {
  const int q = static_cast<int>(params.beta.size());
  Eigen::VectorXd out(q + q * (q + 1) / 2 + 1);
  int k = 0;
  for (int j = 0; j < q; ++j) out(k++) = params.beta(j);
  for (int j = 0; j < q; ++j)
    for (int i = 0; i <= j; ++i) out(k++) = params.psi(j, i);
  out(k) = params.sigma2_e;
  return out;
}

}  // namespace gcm
