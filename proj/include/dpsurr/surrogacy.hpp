#pragma once

// Surrogate-quality evaluation by leave-one-out prediction.
//
// For each group j the model is refit with j's outcomes masked (its surrogate
// data and covariates stay), giving draws of the predicted outcome effect
// mu~_j. Against the matched-iteration draws of mu_j from the fit that sees
// every outcome, d^_{j,t} = |mu~_{j,t} - mu_{j,t}|. The same machinery with
// the surrogate-free null second stage gives d^0. Comparing the two tells
// whether the surrogate carries predictive information.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpm.hpp"
#include "errors.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "stage1.hpp"
#include "trialgen.hpp"

namespace dpsurr {

/// Everything a fit needs. `masked` lists groups whose outcomes are never
/// used (not even by the reference fit); they are not leave-one-out folds.
struct AnalysisData {
  std::vector<SubjectRecord> subjects;
  int n_treatments = 0;
  int n_biomarkers = 0;
  Eigen::MatrixXd z;  // n_groups x d
  std::vector<int> masked;

  int n_groups() const { return n_treatments * n_biomarkers; }
  bool is_masked(int j) const { return std::find(masked.begin(), masked.end(), j) != masked.end(); }
  std::vector<int> fold_groups() const {
    std::vector<int> out;
    for (int j = 0; j < n_groups(); ++j)
      if (!is_masked(j)) out.push_back(j);
    return out;
  }
};

struct LooResult {
  int group = 0;
  std::vector<double> loo_mu;   // mu~_j
  std::vector<double> full_mu;  // mu_j under the reference fit
  std::vector<double> dhat;     // |loo_mu - full_mu|
  std::vector<int> assigned_cluster;
  // Fold-chain labels of every group, draw-major (t * n_groups + i); lets
  // callers score co-clustering without keeping the whole chain.
  std::vector<int> labels;
  int n_groups = 0;

  int size() const { return static_cast<int>(dhat.size()); }
  int label(int t, int i) const { return labels[static_cast<std::size_t>(t) * n_groups + i]; }
};

/// Refit with group j's outcomes masked and pair the predictions with
/// `reference` by retained-iteration index. With `plug_in`, the reference
/// draws are replaced by their posterior mean.
inline LooResult loo_predict(const AnalysisData& data, const DpmConfig& cfg, int j, const PosteriorDraws& reference,
                             Rng& rng, bool plug_in = false) {
  const int n = data.n_groups();
  if (j < 0 || j >= n) throw DataError("loo_predict: group " + std::to_string(j + 1) + " does not exist");
  if (data.is_masked(j)) throw DataError("loo_predict: group " + std::to_string(j + 1) + " has no outcome data");
  std::vector<int> mask = data.masked;
  mask.push_back(j);
  const Stage1Data sd = make_stage1_data(data.subjects, data.n_treatments, data.n_biomarkers, mask);
  const int m = j / data.n_treatments;
  bool stratum_has_treated_y = false;
  for (int k = 0; k < data.n_treatments; ++k)
    if (!sd.y_masked[m * data.n_treatments + k]) stratum_has_treated_y = true;
  if (!stratum_has_treated_y && data.n_treatments > 1)
    throw DataError("loo_predict: masking group " + std::to_string(j + 1) + " leaves biomarker " +
                    std::to_string(m + 1) + " with no treated outcome data");

  const PosteriorDraws pd = run_chain(sd, data.z, cfg, rng);
  if (pd.size() != reference.size())
    throw DataError("loo_predict: fold and reference draw counts differ");

  LooResult r;
  r.group = j;
  r.n_groups = n;
  const int t_count = pd.size();
  r.loo_mu.resize(t_count);
  r.full_mu.resize(t_count);
  r.dhat.resize(t_count);
  r.assigned_cluster.resize(t_count);
  r.labels.resize(static_cast<std::size_t>(t_count) * n);
  double ref_mean = 0.0;
  if (plug_in) {
    for (const auto& d : reference.draws) ref_mean += d.mu(j);
    ref_mean /= reference.size();
  }
  for (int t = 0; t < t_count; ++t) {
    r.loo_mu[t] = pd.draws[t].mu(j);
    r.full_mu[t] = plug_in ? ref_mean : reference.draws[t].mu(j);
    r.dhat[t] = std::abs(r.loo_mu[t] - r.full_mu[t]);
    const auto& lab = pd.draws[t].clusters.labels;
    r.assigned_cluster[t] = lab[j];
    std::copy(lab.begin(), lab.end(), r.labels.begin() + static_cast<std::ptrdiff_t>(t) * n);
  }
  return r;
}

struct ModelFit {
  SecondStage model = SecondStage::dpm;
  PosteriorDraws reference;
  std::vector<LooResult> folds;  // ordered by group
};

/// Reference fit plus every leave-one-out fold. Each chain's stream is
/// derived from (seed, fold coordinate) so results do not depend on `jobs`.
inline ModelFit evaluate_model(const AnalysisData& data, const DpmConfig& cfg, std::uint64_t seed, int jobs = 1,
                               bool plug_in = false) {
  ModelFit fit;
  fit.model = cfg.second_stage;
  {
    Rng rng(derive_seed(seed, {0}));
    const Stage1Data sd = make_stage1_data(data.subjects, data.n_treatments, data.n_biomarkers, data.masked);
    try {
      fit.reference = run_chain(sd, data.z, cfg, rng);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string("reference fit: ") + e.what(), e.iteration());
    }
  }
  const std::vector<int> groups = data.fold_groups();
  fit.folds.resize(groups.size());
  const auto errors = parallel_for(groups.size(), jobs, [&](std::size_t i) {
    const int j = groups[i];
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(j) + 1}));
    try {
      fit.folds[i] = loo_predict(data, cfg, j, fit.reference, rng, plug_in);
    } catch (const DivergenceError& e) {
      throw DivergenceError("fold " + std::to_string(j + 1) + ": " + e.what(), e.iteration());
    } catch (const Error& e) {
      throw Error("fold " + std::to_string(j + 1) + ": " + e.what());
    }
  });
  rethrow_first(errors);
  return fit;
}

/// D^ draws: per retained iteration, the mean over folds of d^_j.
inline std::vector<double> compute_dhat(const std::vector<LooResult>& results) {
  if (results.empty()) return {};
  const int t_count = results.front().size();
  for (const auto& r : results)
    if (r.size() != t_count) throw DataError("compute_dhat: folds have different draw counts");
  std::vector<double> out(t_count, 0.0);
  for (const auto& r : results)
    for (int t = 0; t < t_count; ++t) out[t] += r.dhat[t];
  for (double& v : out) v /= static_cast<double>(results.size());
  return out;
}

/// All d^_{j,t}, fold-major.
inline std::vector<double> pooled_dhat(const std::vector<LooResult>& results) {
  std::vector<double> out;
  for (const auto& r : results) out.insert(out.end(), r.dhat.begin(), r.dhat.end());
  return out;
}

/// Truth-based errors |mu~_{j,t} - mu_j| (fold-major).
inline std::vector<double> pooled_true_error(const std::vector<LooResult>& results, std::span<const double> true_mu) {
  std::vector<double> out;
  for (const auto& r : results)
    for (double v : r.loo_mu) out.push_back(std::abs(v - true_mu[r.group]));
  return out;
}

/// Null-model D^0 draws for `data`.
inline std::vector<double> compute_null_dhat(const AnalysisData& data, DpmConfig cfg, std::uint64_t seed,
                                             int jobs = 1) {
  cfg.second_stage = SecondStage::null;
  return compute_dhat(evaluate_model(data, cfg, seed, jobs).folds);
}

/// P(a < b) over index-paired draws, ties counted one half. Pairs run up
/// to the shorter vector.
inline double prob_superiority(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = std::min(a.size(), b.size());
  if (n == 0) throw DomainError("prob_superiority: empty draw vector");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] < b[i] ? 1.0 : (a[i] == b[i] ? 0.5 : 0.0);
  return s / static_cast<double>(n);
}

/// Relabel a partition by order of first appearance (0-based).
inline std::vector<int> canonical_labels(std::span<const int> labels) {
  std::map<int, int> map;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = map.try_emplace(labels[i], static_cast<int>(map.size()));
    out[i] = it->second;
  }
  return out;
}

/// Least-squares partition: the sampled partition whose association matrix
/// is closest to the posterior co-clustering matrix. Earliest draw wins ties.
inline std::vector<int> dahl_cluster_estimate(const std::vector<std::vector<int>>& label_draws) {
  if (label_draws.empty()) throw DomainError("dahl_cluster_estimate: no draws");
  const std::size_t n = label_draws.front().size();
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (const auto& lab : label_draws) {
    if (lab.size() != n) throw DomainError("dahl_cluster_estimate: ragged label draws");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = i + 1; k < n; ++k)
        if (lab[i] == lab[k]) p(i, k) += 1.0;
  }
  p /= static_cast<double>(label_draws.size());
  std::size_t best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < label_draws.size(); ++t) {
    const auto& lab = label_draws[t];
    double score = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = i + 1; k < n; ++k) {
        const double a = lab[i] == lab[k] ? 1.0 : 0.0;
        score += (a - p(i, k)) * (a - p(i, k));
      }
    if (score < best_score - 1e-12) {
      best_score = score;
      best = t;
    }
  }
  return canonical_labels(label_draws[best]);
}

inline std::vector<std::vector<int>> label_draws(const PosteriorDraws& pd) {
  std::vector<std::vector<int>> out;
  out.reserve(pd.draws.size());
  for (const auto& d : pd.draws) out.push_back(d.clusters.labels);
  return out;
}

/// Mean over folds and draws of the share of other groups whose
/// same-cluster status with the left-out group agrees with the truth.
inline double cluster_recovery(const std::vector<LooResult>& folds, std::span<const int> true_clusters) {
  if (folds.empty()) throw DomainError("cluster_recovery: no folds");
  double total = 0.0;
  for (const auto& f : folds) {
    const int n = f.n_groups;
    const int j = f.group;
    double acc = 0.0;
    for (int t = 0; t < f.size(); ++t) {
      int agree = 0;
      const int lj = f.label(t, j);
      for (int i = 0; i < n; ++i) {
        if (i == j) continue;
        agree += ((f.label(t, i) == lj) == (true_clusters[i] == true_clusters[j])) ? 1 : 0;
      }
      acc += static_cast<double>(agree) / (n - 1);
    }
    total += acc / f.size();
  }
  return total / folds.size();
}

// ---------------------------------------------------------------------------
// Summaries

struct Summary {
  int n = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
  double q025 = std::numeric_limits<double>::quiet_NaN();
  double q25 = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  double q75 = std::numeric_limits<double>::quiet_NaN();
  double q975 = std::numeric_limits<double>::quiet_NaN();
};

/// Linear-interpolation quantile (type 7) of sorted data.
inline double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double h = (sorted.size() - 1) * q;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - lo) * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  return sorted_quantile(v, q);
}

inline Summary summarize(std::vector<double> v) {
  Summary s;
  s.n = static_cast<int>(v.size());
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.sd = v.size() > 1 ? std::sqrt(ss / (v.size() - 1)) : 0.0;
  s.q025 = sorted_quantile(v, 0.025);
  s.q25 = sorted_quantile(v, 0.25);
  s.median = sorted_quantile(v, 0.5);
  s.q75 = sorted_quantile(v, 0.75);
  s.q975 = sorted_quantile(v, 0.975);
  return s;
}

struct GroupMeta {
  int j = 0;
  int m = 0;
  int k = 0;
  double z = 0.0;  // first covariate
};

inline std::vector<GroupMeta> group_meta(const AnalysisData& data) {
  std::vector<GroupMeta> out(data.n_groups());
  for (int j = 0; j < data.n_groups(); ++j)
    out[j] = {j, j / data.n_treatments, j % data.n_treatments, data.z.cols() > 0 ? data.z(j, 0) : 0.0};
  return out;
}

struct SubgroupSummary {
  std::string key;
  std::vector<int> groups;  // 0-based
  Summary dhat;             // pooled d^ over member folds
  double p_superiority = std::numeric_limits<double>::quiet_NaN();
  bool flagged = false;
};

struct GroupPrediction {
  int j = 0;
  double loo_median = 0.0, loo_q025 = 0.0, loo_q975 = 0.0;
  double full_median = 0.0;
  int cluster = 0;  // estimated partition label (0-based)
  // median +/- the median leave-one-out error of the group's cluster
  double interval_lower = 0.0, interval_upper = 0.0;
  std::optional<double> true_mu;
};

struct QualityReport {
  std::string model;
  int n_groups = 0;
  int n_folds = 0;
  int n_draws = 0;
  Summary dhat;         // per-iteration D^ (mean over folds)
  Summary dhat_pooled;  // every d^_{j,t}
  std::optional<Summary> dhat0, dhat0_pooled;
  std::optional<double> p_superiority;       // elementwise over (j, t)
  std::optional<double> p_superiority_mean;  // over per-iteration D^ vs D^0
  std::optional<Summary> d_true, d0_true;    // truth-based errors, pooled
  std::optional<double> p_true;              // P(D < D^0)
  std::vector<int> estimated_partition;
  std::vector<SubgroupSummary> per_cluster, per_treatment, per_biomarker, per_z;
  std::vector<GroupPrediction> per_group;
};

namespace detail {

inline std::vector<double> pooled_subset(const std::vector<LooResult>& folds, const std::vector<int>& groups) {
  std::vector<double> out;
  for (const auto& f : folds)
    if (std::find(groups.begin(), groups.end(), f.group) != groups.end())
      out.insert(out.end(), f.dhat.begin(), f.dhat.end());
  return out;
}

inline SubgroupSummary summarize_subgroup(std::string key, std::vector<int> groups, const std::vector<LooResult>& folds,
                                          const std::vector<LooResult>* null_folds) {
  SubgroupSummary s;
  s.key = std::move(key);
  s.groups = std::move(groups);
  const auto d = pooled_subset(folds, s.groups);
  s.dhat = summarize(d);
  if (null_folds && !d.empty()) {
    const auto d0 = pooled_subset(*null_folds, s.groups);
    if (d0.size() == d.size()) s.p_superiority = prob_superiority(d, d0);
  }
  return s;
}

}  // namespace detail

// A cluster is flagged when its median d^ departs from the overall median
// by more than this fraction.
inline constexpr double kClusterFlagTolerance = 0.10;

/// Overall, per-cluster and per-stratum summaries. `partition` assigns every
/// group a cluster (0-based); `null_fit` and `true_mu` are optional.
inline QualityReport subgroup_summaries(const ModelFit& fit, const std::vector<int>& partition,
                                        const std::vector<GroupMeta>& meta, const ModelFit* null_fit = nullptr,
                                        std::span<const double> true_mu = {}) {
  QualityReport r;
  r.model = to_string(fit.model);
  r.n_groups = static_cast<int>(meta.size());
  r.n_folds = static_cast<int>(fit.folds.size());
  r.n_draws = fit.folds.empty() ? 0 : fit.folds.front().size();
  r.estimated_partition = partition;
  const auto dh = compute_dhat(fit.folds);
  const auto dp = pooled_dhat(fit.folds);
  r.dhat = summarize(dh);
  r.dhat_pooled = summarize(dp);
  const std::vector<LooResult>* nf = null_fit ? &null_fit->folds : nullptr;
  if (null_fit) {
    const auto dh0 = compute_dhat(null_fit->folds);
    const auto dp0 = pooled_dhat(null_fit->folds);
    r.dhat0 = summarize(dh0);
    r.dhat0_pooled = summarize(dp0);
    r.p_superiority = prob_superiority(dp, dp0);
    r.p_superiority_mean = prob_superiority(dh, dh0);
  }
  if (!true_mu.empty()) {
    const auto d = pooled_true_error(fit.folds, true_mu);
    r.d_true = summarize(d);
    if (null_fit) {
      const auto d0 = pooled_true_error(null_fit->folds, true_mu);
      r.d0_true = summarize(d0);
      r.p_true = prob_superiority(d, d0);
    }
  }

  const int k = partition.empty() ? 0 : *std::max_element(partition.begin(), partition.end()) + 1;
  for (int c = 0; c < k; ++c) {
    std::vector<int> g;
    for (int j = 0; j < r.n_groups; ++j)
      if (partition[j] == c) g.push_back(j);
    auto s = detail::summarize_subgroup("cluster " + std::to_string(c + 1), g, fit.folds, nf);
    s.flagged = s.dhat.n > 0 &&
                std::abs(s.dhat.median - r.dhat_pooled.median) > kClusterFlagTolerance * r.dhat_pooled.median;
    r.per_cluster.push_back(std::move(s));
  }
  int n_trt = 0, n_bio = 0;
  for (const auto& m : meta) {
    n_trt = std::max(n_trt, m.k + 1);
    n_bio = std::max(n_bio, m.m + 1);
  }
  for (int kk = 0; kk < n_trt; ++kk) {
    std::vector<int> g;
    for (const auto& m : meta)
      if (m.k == kk) g.push_back(m.j);
    r.per_treatment.push_back(detail::summarize_subgroup("treatment " + std::to_string(kk + 1), g, fit.folds, nf));
  }
  for (int mm = 0; mm < n_bio; ++mm) {
    std::vector<int> g;
    for (const auto& m : meta)
      if (m.m == mm) g.push_back(m.j);
    r.per_biomarker.push_back(detail::summarize_subgroup("biomarker " + std::to_string(mm + 1), g, fit.folds, nf));
  }
  {
    std::vector<double> zs;
    for (const auto& m : meta) zs.push_back(m.z);
    const double zmed = quantile(zs, 0.5);
    std::vector<int> lo, hi;
    for (const auto& m : meta) (m.z <= zmed ? lo : hi).push_back(m.j);
    r.per_z.push_back(detail::summarize_subgroup("z <= median", lo, fit.folds, nf));
    r.per_z.push_back(detail::summarize_subgroup("z > median", hi, fit.folds, nf));
  }

  for (const auto& f : fit.folds) {
    GroupPrediction g;
    g.j = f.group;
    std::vector<double> v = f.loo_mu;
    std::sort(v.begin(), v.end());
    g.loo_median = sorted_quantile(v, 0.5);
    g.loo_q025 = sorted_quantile(v, 0.025);
    g.loo_q975 = sorted_quantile(v, 0.975);
    g.full_median = quantile(f.full_mu, 0.5);
    g.cluster = partition.empty() ? 0 : partition[f.group];
    const double err = r.per_cluster.empty() ? r.dhat_pooled.median : r.per_cluster[g.cluster].dhat.median;
    g.interval_lower = g.loo_median - err;
    g.interval_upper = g.loo_median + err;
    if (!true_mu.empty()) g.true_mu = true_mu[f.group];
    r.per_group.push_back(g);
  }
  return r;
}

/// Gaussian kernel density estimate on an even grid (Silverman bandwidth).
inline std::vector<double> density_on_grid(std::span<const double> x, std::span<const double> grid) {
  std::vector<double> out(grid.size(), 0.0);
  if (x.empty()) return out;
  std::vector<double> v(x.begin(), x.end());
  const Summary s = summarize(v);
  const double iqr = s.q75 - s.q25;
  double spread = std::min(s.sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = s.sd > 0.0 ? s.sd : 1.0;
  const double h = 0.9 * spread * std::pow(static_cast<double>(x.size()), -0.2);
  const double norm = 1.0 / (x.size() * h * std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double acc = 0.0;
    for (double xi : x) {
      const double u = (grid[g] - xi) / h;
      acc += std::exp(-0.5 * u * u);
    }
    out[g] = acc * norm;
  }
  return out;
}

}  // namespace dpsurr
