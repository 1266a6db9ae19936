#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gcm/csv.hpp"
#include "gcm/datagen.hpp"
#include "gcm/fiml.hpp"
#include "gcm/rmb.hpp"
#include "gcm/rng.hpp"
#include "gcm/tsre.hpp"
#include "gcm/types.hpp"

namespace gcm {

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

/// Absolute relative bias in percent: 100 |mean(est) - theta| / |theta|,
/// falling back to the unscaled absolute bias when theta = 0.
inline double relative_bias(std::span<const double> estimates, double theta) {
  if (estimates.empty()) throw std::invalid_argument("relative_bias: empty input");
  double mean = 0.0;
  for (double e : estimates) mean += e;
  mean /= static_cast<double>(estimates.size());
  if (theta == 0.0) return std::abs(mean - theta);
  return 100.0 * std::abs((mean - theta) / theta);
}

inline double mse(std::span<const double> estimates, double theta) {
  if (estimates.empty()) throw std::invalid_argument("mse: empty input");
  double s = 0.0;
  for (double e : estimates) s += (e - theta) * (e - theta);
  return s / static_cast<double>(estimates.size());
}

// ---------------------------------------------------------------------------
// Conditions.
// ---------------------------------------------------------------------------

struct Condition {
  int n = 200;
  Mechanism mechanism = Mechanism::None;
  double mr = 0.0;
  ErrorKind dist = ErrorKind::Normal;

  std::string id() const {
    std::ostringstream os;
    os << "n" << n << "_";
    if (mechanism == Mechanism::None)
      os << "complete";
    else
      os << to_string(mechanism) << "_mr" << static_cast<int>(std::lround(mr * 100));
    os << "_" << to_string(dist);
    return os.str();
  }
};

/// The full factorial design: three sample sizes, four error distributions,
/// complete-data baselines plus MAR/MNAR at three missingness rates
/// (3 x 4 + 3 x 2 x 3 x 4 = 84 conditions).
inline std::vector<Condition> default_grid() {
  const std::vector<int> ns = {100, 200, 500};
  const std::vector<ErrorKind> dists = {ErrorKind::Normal, ErrorKind::StudentT5,
                                        ErrorKind::NormalWithOutliers, ErrorKind::LogNormal};
  const std::vector<Mechanism> mechs = {Mechanism::MAR, Mechanism::MNAR};
  const std::vector<double> rates = {0.05, 0.15, 0.30};
  std::vector<Condition> grid;
  for (int n : ns) {
    for (ErrorKind d : dists) grid.push_back({n, Mechanism::None, 0.0, d});
    for (Mechanism m : mechs)
      for (double mr : rates)
        for (ErrorKind d : dists) grid.push_back({n, m, mr, d});
  }
  return grid;
}

struct ParamStats {
  double rb = 0.0;
  double mse = 0.0;
};

struct MethodResult {
  std::map<std::string, ParamStats> params;
  int reps_used = 0;
  int reps_total = 0;
  double convergence_rate = 0.0;
};

struct ConditionResult {
  Condition cond;
  std::map<std::string, MethodResult> methods;
};

/// One fitted replication: parameter estimates per method plus convergence.
struct RepRecord {
  int rep = 0;
  std::string method;
  bool converged = false;
  std::map<std::string, double> estimates;
};

struct SimOptions {
  int reps = 500;
  std::uint64_t base_seed = 20250101;
  std::vector<std::string> methods = {"fiml", "tsre", "rmb"};
  int jobs = 1;
  bool resume = false;
  double mnar_r = 0.8;
  GrowthModelSpec spec = GrowthModelSpec::linear(4);
  ParameterSet truth;
  ChainConfig rmb_config;  // harness default is the 6,000-iteration test profile
  TsreOptions tsre;
  FimlOptions fiml;
  std::optional<std::string> emit_data_dir;

  SimOptions() {
    truth.beta = Eigen::Vector2d(6.0, 2.0);
    truth.psi = Eigen::Matrix2d::Identity();
    truth.sigma2_e = 1.0;
    rmb_config.n_iter = 6000;
    rmb_config.burnin = -1;
  }
};

/// Stable per-replication seed: methods fitted to replication j of a
/// condition all see the same dataset, and reruns reproduce it bit-for-bit.
inline std::uint64_t replication_seed(std::uint64_t base_seed, const Condition& cond, int rep) {
  std::string key = cond.id() + "|" + std::to_string(rep) + "|" + std::to_string(base_seed);
  return splitmix64(fnv1a(key));
}

namespace simstudy_detail {

template <typename F>
void parallel_for(int count, int jobs, F&& body) {
  jobs = std::max(1, jobs);
  if (jobs == 1 || count <= 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> workers;
  workers.reserve(jobs);
  for (int w = 0; w < jobs; ++w)
    workers.emplace_back([&] {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) body(i);
    });
  for (auto& t : workers) t.join();
}

inline std::map<std::string, double> estimates_map(const GrowthModelSpec& spec,
                                                   const ParameterSet& est) {
  std::map<std::string, double> out;
  const auto names = parameter_names(spec);
  const Eigen::VectorXd flat = flatten_parameters(est);
  for (std::size_t k = 0; k < names.size(); ++k) out[names[k]] = flat(k);
  return out;
}

inline std::map<std::string, double> nan_estimates(const GrowthModelSpec& spec) {
  std::map<std::string, double> out;
  for (const auto& name : parameter_names(spec))
    out[name] = std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace simstudy_detail

/// Generates and fits every replication of one condition. Failures of an
/// individual fit are recorded as non-converged and excluded downstream.
inline std::vector<RepRecord> run_condition_reps(const Condition& cond, const SimOptions& opts) {
  std::vector<std::vector<RepRecord>> slots(opts.reps);
  std::mutex emit_mutex;

  simstudy_detail::parallel_for(opts.reps, opts.jobs, [&](int rep) {
    const std::uint64_t seed = replication_seed(opts.base_seed, cond, rep);
    Rng rng = make_rng(seed);
    std::vector<RepRecord>& records = slots[rep];
    try {
      SimulatedDataset sim = gen_complete(opts.spec, opts.truth,
                                          ErrorDistribution::from_kind(cond.dist), cond.n, rng);
      if (cond.mechanism == Mechanism::MAR) {
        sim = impose_mar(std::move(sim), cond.mr, rng);
      } else if (cond.mechanism == Mechanism::MNAR) {
        sim = impose_mnar(std::move(sim), opts.truth, opts.mnar_r, cond.mr, rng);
      }
      if (opts.emit_data_dir) {
        namespace fs = std::filesystem;
        std::lock_guard<std::mutex> lock(emit_mutex);
        const fs::path dir = fs::path(*opts.emit_data_dir) / cond.id();
        fs::create_directories(dir);
        write_wide_csv_file((dir / ("rep_" + std::to_string(rep) + ".csv")).string(), sim.data);
      }

      for (const std::string& method : opts.methods) {
        RepRecord rec;
        rec.rep = rep;
        rec.method = method;
        try {
          if (method == "fiml") {
            const FitResult fit = fiml_fit(opts.spec, sim.data, opts.fiml);
            rec.converged = fit.converged;
            rec.estimates = simstudy_detail::estimates_map(opts.spec, fit.estimates);
          } else if (method == "tsre") {
            const TsreFit fit = tsre_fit(opts.spec, sim.data, opts.tsre);
            rec.converged = fit.result.converged;
            rec.estimates = simstudy_detail::estimates_map(opts.spec, fit.result.estimates);
          } else if (method == "rmb") {
            ChainConfig cfg = opts.rmb_config;
            cfg.seed = splitmix64(seed ^ fnv1a("rmb"));
            const bool selection = cond.mechanism == Mechanism::MNAR;
            RmbPriors priors;
            const RmbFit fit = rmb_fit(opts.spec, sim.data, priors, cfg, selection);
            rec.converged = fit.result.converged;
            rec.estimates = simstudy_detail::estimates_map(opts.spec, fit.result.estimates);
          } else {
            throw std::invalid_argument("unknown method '" + method + "'");
          }
        } catch (const std::invalid_argument&) {
          throw;  // misconfiguration, not a replication-level failure
        } catch (const std::exception&) {
          rec.converged = false;
          rec.estimates = simstudy_detail::nan_estimates(opts.spec);
        }
        records.push_back(std::move(rec));
      }
    } catch (const std::exception&) {
      records.clear();
      for (const std::string& method : opts.methods) {
        RepRecord rec;
        rec.rep = rep;
        rec.method = method;
        rec.converged = false;
        rec.estimates = simstudy_detail::nan_estimates(opts.spec);
        records.push_back(std::move(rec));
      }
    }
  });

  std::vector<RepRecord> out;
  out.reserve(static_cast<std::size_t>(opts.reps) * opts.methods.size());
  for (auto& slot : slots)
    for (auto& rec : slot) out.push_back(std::move(rec));
  return out;
}

/// RB/MSE per method and parameter over converged replications with finite
/// estimates; convergence rate counts everything that was attempted.
inline ConditionResult aggregate_condition(const Condition& cond,
                                           const std::vector<RepRecord>& records,
                                           const SimOptions& opts) {
  ConditionResult result;
  result.cond = cond;
  const auto names = parameter_names(opts.spec);
  const Eigen::VectorXd truth_flat = flatten_parameters(opts.truth);

  for (const std::string& method : opts.methods) {
    MethodResult mres;
    std::map<std::string, std::vector<double>> pools;
    for (const auto& rec : records) {
      if (rec.method != method) continue;
      ++mres.reps_total;
      if (!rec.converged) continue;
      bool finite = true;
      for (const auto& name : names) {
        const auto it = rec.estimates.find(name);
        if (it == rec.estimates.end() || !std::isfinite(it->second)) finite = false;
      }
      if (!finite) continue;
      ++mres.reps_used;
      for (const auto& name : names) pools[name].push_back(rec.estimates.at(name));
    }
    mres.convergence_rate =
        mres.reps_total > 0 ? static_cast<double>(mres.reps_used) / mres.reps_total : 0.0;
    for (std::size_t k = 0; k < names.size(); ++k) {
      ParamStats stats;
      if (!pools[names[k]].empty()) {
        stats.rb = relative_bias(pools[names[k]], truth_flat(k));
        stats.mse = mse(pools[names[k]], truth_flat(k));
      } else {
        stats.rb = std::numeric_limits<double>::quiet_NaN();
        stats.mse = std::numeric_limits<double>::quiet_NaN();
      }
      mres.params[names[k]] = stats;
    }
    result.methods[method] = mres;
  }
  return result;
}

inline ConditionResult run_condition(const Condition& cond, const SimOptions& opts) {
  return aggregate_condition(cond, run_condition_reps(cond, opts), opts);
}

// ---------------------------------------------------------------------------
// Grid runs with checkpoint/resume. The per-replication records are the
// checkpoint format and double as the raw estimate dump used for audits.
// ---------------------------------------------------------------------------

namespace simstudy_detail {

inline void write_records_csv(const std::string& path, const std::vector<RepRecord>& records,
                              const std::vector<std::string>& names) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError(tmp + ": cannot open for writing");
    out << "rep,method,converged";
    for (const auto& name : names) out << "," << name;
    out << "\n";
    for (const auto& rec : records) {
      out << rec.rep << "," << rec.method << "," << (rec.converged ? 1 : 0);
      for (const auto& name : names) {
        const auto it = rec.estimates.find(name);
        const double v = it == rec.estimates.end() ? std::numeric_limits<double>::quiet_NaN()
                                                   : it->second;
        out << ",";
        if (std::isfinite(v))
          out << csv_detail::format_double(v);
        else
          out << "NA";
      }
      out << "\n";
    }
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<RepRecord> read_records_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty checkpoint");
  const auto header = csv_detail::split_line(line);
  if (header.size() < 4 || header[0] != "rep" || header[1] != "method" ||
      header[2] != "converged")
    throw DataError(path + ": unexpected checkpoint header");
  std::vector<std::string> names(header.begin() + 3, header.end());
  std::vector<RepRecord> records;
  while (std::getline(in, line)) {
    if (csv_detail::trim(line).empty()) continue;
    const auto fields = csv_detail::split_line(line);
    if (fields.size() != header.size()) throw DataError(path + ": ragged checkpoint row");
    RepRecord rec;
    rec.rep = std::stoi(fields[0]);
    rec.method = fields[1];
    rec.converged = fields[2] == "1";
    for (std::size_t k = 0; k < names.size(); ++k) {
      const std::string cell = csv_detail::trim(fields[k + 3]);
      rec.estimates[names[k]] =
          cell == "NA" ? std::numeric_limits<double>::quiet_NaN() : std::stod(cell);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline nlohmann::json manifest_json(const std::vector<Condition>& grid, const SimOptions& opts) {
  nlohmann::json m;
  m["version"] = "0.1.0";
  m["base_seed"] = opts.base_seed;
  m["reps"] = opts.reps;
  m["methods"] = opts.methods;
  m["rmb_iterations"] = opts.rmb_config.n_iter;
  m["rmb_profile"] = opts.rmb_config.n_iter >= 60000 ? "paper" : "test";
  m["huber_prob"] = opts.tsre.huber_prob;
  m["mnar_r"] = opts.mnar_r;
  nlohmann::json conds = nlohmann::json::array();
  for (const auto& c : grid) conds.push_back(c.id());
  m["conditions"] = conds;
  return m;
}

}  // namespace simstudy_detail

/// Runs (or resumes) a grid, writing per-condition checkpoints, the
/// long-format results table, convergence rates, and a manifest into out_dir.
inline std::vector<ConditionResult> run_grid(const std::vector<Condition>& grid,
                                             const SimOptions& opts,
                                             const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "checkpoints");
  const auto names = parameter_names(opts.spec);

  const nlohmann::json manifest = simstudy_detail::manifest_json(grid, opts);
  const fs::path manifest_path = fs::path(out_dir) / "manifest.json";
  if (opts.resume && fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    nlohmann::json existing;
    in >> existing;
    if (existing != manifest)
      throw std::runtime_error("resume: existing manifest does not match this configuration");
  } else {
    const std::string tmp = manifest_path.string() + ".tmp";
    std::ofstream out(tmp);
    out << manifest.dump(2) << "\n";
    out.close();
    fs::rename(tmp, manifest_path);
  }

  std::vector<ConditionResult> results;
  for (const auto& cond : grid) {
    const fs::path ckpt = fs::path(out_dir) / "checkpoints" / (cond.id() + ".csv");
    std::vector<RepRecord> records;
    if (opts.resume && fs::exists(ckpt)) {
      records = simstudy_detail::read_records_csv(ckpt.string());
    } else {
      records = run_condition_reps(cond, opts);
      simstudy_detail::write_records_csv(ckpt.string(), records, names);
    }
    results.push_back(aggregate_condition(cond, records, opts));
  }

  // Long-format results table.
  {
    const std::string tmp = (fs::path(out_dir) / "results.csv").string() + ".tmp";
    std::ofstream out(tmp);
    out << "n,mechanism,mr,dist,method,parameter,rb,mse,convergence_rate,reps_used\n";
    for (const auto& res : results) {
      for (const auto& method : opts.methods) {
        const auto& mres = res.methods.at(method);
        for (const auto& name : names) {
          const auto& stats = mres.params.at(name);
          out << res.cond.n << "," << to_string(res.cond.mechanism) << ","
              << csv_detail::format_double(res.cond.mr) << "," << to_string(res.cond.dist) << ","
              << method << "," << name << ","
              << (std::isfinite(stats.rb) ? csv_detail::format_double(stats.rb) : "NA") << ","
              << (std::isfinite(stats.mse) ? csv_detail::format_double(stats.mse) : "NA") << ","
              << csv_detail::format_double(mres.convergence_rate) << "," << mres.reps_used
              << "\n";
        }
      }
    }
    out.close();
    fs::rename(tmp, fs::path(out_dir) / "results.csv");
  }
  {
    const std::string tmp = (fs::path(out_dir) / "convergence.csv").string() + ".tmp";
    std::ofstream out(tmp);
    out << "n,mechanism,mr,dist,method,converged,reps,rate\n";
    for (const auto& res : results)
      for (const auto& method : opts.methods) {
        const auto& mres = res.methods.at(method);
        out << res.cond.n << "," << to_string(res.cond.mechanism) << ","
            << csv_detail::format_double(res.cond.mr) << "," << to_string(res.cond.dist) << ","
            << method << "," << mres.reps_used << "," << mres.reps_total << ","
            << csv_detail::format_double(mres.convergence_rate) << "\n";
      }
    out.close();
    fs::rename(tmp, fs::path(out_dir) / "convergence.csv");
  }

  if (opts.emit_data_dir) {
    // One truth row per (condition, replication): the generating parameters.
    const fs::path truth_path = fs::path(*opts.emit_data_dir) / "truth.csv";
    fs::create_directories(truth_path.parent_path());
    const std::string tmp = truth_path.string() + ".tmp";
    std::ofstream out(tmp);
    out << "condition,rep";
    for (const auto& name : names) out << "," << name;
    out << "\n";
    const Eigen::VectorXd truth_flat = flatten_parameters(opts.truth);
    for (const auto& cond : grid)
      for (int rep = 0; rep < opts.reps; ++rep) {
        out << cond.id() << "," << rep;
        for (int k = 0; k < truth_flat.size(); ++k)
          out << "," << csv_detail::format_double(truth_flat(k));
        out << "\n";
      }
    out.close();
    fs::rename(tmp, truth_path);
  }
  return results;
}

}  // namespace gcm
