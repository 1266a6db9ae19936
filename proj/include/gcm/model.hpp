#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "gcm/types.hpp"

namespace gcm {

/// Model-implied mean vector of the T occasions.
inline Eigen::VectorXd implied_mean(const GrowthModelSpec& spec, const ParameterSet& params) {
  if (params.beta.size() != spec.effects())
    throw std::invalid_argument("beta dimension does not match loading columns");
  return spec.loadings * params.beta;
}

/// Model-implied T x T covariance: loadings * psi * loadings' + sigma2_e * I.
inline Eigen::MatrixXd implied_covariance(const GrowthModelSpec& spec,
                                          const ParameterSet& params) {
  params.validate();
  if (params.beta.size() != spec.effects())
    throw std::invalid_argument("parameter dimension does not match loading columns");
  Eigen::MatrixXd sigma = spec.loadings * params.psi * spec.loadings.transpose();
  sigma.diagonal().array() += params.sigma2_e;
  // Force exact symmetry; downstream Cholesky factorizations assume it.
  sigma = 0.5 * (sigma + sigma.transpose()).eval();
  return sigma;
}

struct ObservedSubproblem {
  Eigen::VectorXd y;
  std::vector<int> occasions;  // indices into 0..T-1, in time order
};

/// Observed subvector of one subject plus the occasion indices it came from.
inline ObservedSubproblem observed_subproblem(const LongitudinalDataset& data, int subject) {
  if (subject < 0 || subject >= data.n()) throw std::invalid_argument("subject index out of range");
  ObservedSubproblem sub;
  for (int t = 0; t < data.occasions(); ++t)
    if (data.mask(subject, t)) sub.occasions.push_back(t);
  if (sub.occasions.empty())
    throw std::invalid_argument("subject has no observed occasions");
  sub.y.resize(sub.occasions.size());
  for (std::size_t k = 0; k < sub.occasions.size(); ++k)
    sub.y(k) = data.values(subject, sub.occasions[k]);
  return sub;
}

/// Subjects sharing a missingness pattern; estimators exploit this to
/// factorize each observed-data covariance once per pattern.
struct PatternGroup {
  std::vector<int> occasions;
  std::vector<int> subjects;
};

inline std::vector<PatternGroup> group_missing_patterns(const LongitudinalDataset& data) {
  const int T = data.occasions();
  if (T > 63) throw std::invalid_argument("more than 63 occasions not supported");
  std::map<std::uint64_t, std::vector<int>> by_key;
  for (int i = 0; i < data.n(); ++i) {
    std::uint64_t key = 0;
    for (int t = 0; t < T; ++t)
      if (data.mask(i, t)) key |= (std::uint64_t{1} << t);
    if (key == 0) throw std::invalid_argument("subject with no observed occasions");
    by_key[key].push_back(i);
  }
  std::vector<PatternGroup> groups;
  groups.reserve(by_key.size());
  for (const auto& [key, subjects] : by_key) {
    PatternGroup g;
    for (int t = 0; t < T; ++t)
      if (key & (std::uint64_t{1} << t)) g.occasions.push_back(t);
    g.subjects = subjects;
    groups.push_back(std::move(g));
  }
  return groups;
}

inline Eigen::MatrixXd select_rows(const Eigen::MatrixXd& m, const std::vector<int>& rows) {
  Eigen::MatrixXd out(rows.size(), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(k) = m.row(rows[k]);
  return out;
}

inline Eigen::MatrixXd select_square(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
  Eigen::MatrixXd out(idx.size(), idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = 0; b < idx.size(); ++b) out(a, b) = m(idx[a], idx[b]);
  return out;
}

inline Eigen::VectorXd select_entries(const Eigen::VectorXd& v, const std::vector<int>& idx) {
  Eigen::VectorXd out(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) out(k) = v(idx[k]);
  return out;
}

}  // namespace gcm
