#pragma once

// Study drivers: simulated datasets, the replicated scenario grid with
// crash-resume, and the single-dataset illustrative workflow.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dpm.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "surrogacy.hpp"
#include "trialgen.hpp"

namespace dpsurr {

struct Dataset {
  ScenarioConfig scenario;
  AnalysisData data;
  std::vector<GroupTruth> truth;  // empty when read from files without a sidecar

  std::vector<double> true_mu() const {
    std::vector<double> out;
    for (const auto& g : truth) out.push_back(g.mu);
    return out;
  }
  std::vector<int> true_clusters() const {
    std::vector<int> out;
    for (const auto& g : truth) out.push_back(g.true_cluster.value_or(0));
    return out;
  }
};

inline Eigen::MatrixXd covariates_from_truth(const std::vector<GroupTruth>& truth) {
  Eigen::MatrixXd z(truth.size(), 1);
  for (std::size_t j = 0; j < truth.size(); ++j) z(j, 0) = truth[j].z;
  return z;
}

/// Group effects then the adaptive trial, one stream seeded by sc.seed.
inline Dataset simulate_dataset(const ScenarioConfig& sc, const TrialConfig& tc) {
  Rng rng(sc.seed);
  Dataset ds;
  ds.scenario = sc;
  ds.truth = generate_group_effects(sc, rng);
  ds.data.subjects = simulate_trial(ds.truth, tc, sc, rng);
  ds.data.n_treatments = sc.n_treatments;
  ds.data.n_biomarkers = sc.n_biomarkers;
  ds.data.z = covariates_from_truth(ds.truth);
  return ds;
}

// Job coordinates -> seeds. Scenario cells are keyed by their label so that
// adding a cell to a grid leaves every other cell's streams untouched.
inline std::uint64_t dataset_seed(std::uint64_t root, const std::string& label, int replicate) {
  return derive_seed(root, {fnv1a(label), static_cast<std::uint64_t>(replicate)});
}

inline std::uint64_t model_seed(std::uint64_t root, const std::string& label, int replicate, SecondStage model) {
  return derive_seed(root, {fnv1a(label), static_cast<std::uint64_t>(replicate),
                            0x100u + static_cast<std::uint64_t>(model)});
}

inline void write_dataset_dir(const std::filesystem::path& dir, const Dataset& ds) {
  {
    const auto p = dir / "dataset.csv";
    auto os = io::open_out(p);
    io::write_dataset(os, ds.data.subjects, ds.data.n_treatments, ds.data.n_biomarkers);
    io::close_checked(os, p);
  }
  {
    const auto p = dir / "covariates.csv";
    auto os = io::open_out(p);
    io::write_covariates(os, ds.data.z);
    io::close_checked(os, p);
  }
  if (!ds.truth.empty()) {
    const auto p = dir / "truth.csv";
    auto os = io::open_out(p);
    io::write_truth(os, ds.truth);
    io::close_checked(os, p);
  }
}

inline Dataset read_dataset_dir(const std::filesystem::path& dir) {
  Dataset ds;
  io::DatasetShape shape;
  {
    const auto p = dir / "dataset.csv";
    auto is = io::open_in(p);
    ds.data.subjects = io::read_dataset(is, shape, p.string());
  }
  ds.data.n_treatments = shape.n_treatments;
  ds.data.n_biomarkers = shape.n_biomarkers;
  {
    const auto p = dir / "covariates.csv";
    auto is = io::open_in(p);
    ds.data.z = io::read_covariates(is, ds.data.n_groups(), p.string());
  }
  const auto tp = dir / "truth.csv";
  if (std::filesystem::exists(tp)) {
    auto is = io::open_in(tp);
    ds.truth = io::read_truth(is, tp.string());
    if (static_cast<int>(ds.truth.size()) != ds.data.n_groups()) throw DataError(tp.string() + ": wrong group count");
  }
  ds.scenario.n_treatments = shape.n_treatments;
  ds.scenario.n_biomarkers = shape.n_biomarkers;
  return ds;
}

// ---------------------------------------------------------------------------
// Replicated grid

struct RunManifest {
  std::uint64_t root_seed = 20240501;
  std::vector<ScenarioConfig> scenarios;
  int n_replicates = 20;
  std::vector<SecondStage> models = {SecondStage::dpm, SecondStage::simple};
  DpmConfig dpm;  // chain and prior settings shared by every model
  TrialConfig trial;
  std::filesystem::path output_dir = "out";
  int jobs = 1;

  void validate() const {
    if (n_replicates < 1) throw DomainError("manifest: n_replicates must be >= 1");
    if (scenarios.empty()) throw DomainError("manifest: empty scenario grid");
    if (jobs < 1) throw DomainError("manifest: jobs must be >= 1");
    for (const auto& s : scenarios) s.validate();
    for (auto m : models)
      if (m == SecondStage::null) throw DomainError("manifest: the null model is always run; list dpm/simple only");
    dpm.validate();
    trial.validate();
  }
};

/// The simulation-study prior on (beta^B_m, gamma^B_m): variance 2,
/// covariance 0.05.
inline DpmConfig simulation_dpm_config() {
  DpmConfig c;
  c.tau = 2.0;
  c.nuisance_cov = 0.05;
  return c;
}

struct ModelMetrics {
  double median_dhat = 0.0;   // median of the pooled d^_{j,t}
  double median_d = std::numeric_limits<double>::quiet_NaN();  // truth-based
  double mean_dhat = 0.0;
  double p_superiority = std::numeric_limits<double>::quiet_NaN();       // pooled pairs vs null
  double p_superiority_mean = std::numeric_limits<double>::quiet_NaN();  // per-iteration D^ vs D^0
  double p_true = std::numeric_limits<double>::quiet_NaN();
  double recovery = std::numeric_limits<double>::quiet_NaN();
};

/// Per-fold matrices kept for pairing against the null model.
struct FoldMatrices {
  int folds = 0, draws = 0;
  std::vector<double> dhat;  // fold-major
  std::vector<double> derr;  // truth-based, fold-major; empty without truth
  std::vector<double> dhat_mean;  // per-iteration D^
};

inline FoldMatrices fold_matrices(const ModelFit& fit, std::span<const double> true_mu) {
  FoldMatrices m;
  m.folds = static_cast<int>(fit.folds.size());
  m.draws = fit.folds.empty() ? 0 : fit.folds.front().size();
  m.dhat = pooled_dhat(fit.folds);
  if (!true_mu.empty()) m.derr = pooled_true_error(fit.folds, true_mu);
  m.dhat_mean = compute_dhat(fit.folds);
  return m;
}

inline ModelMetrics model_metrics(const FoldMatrices& m, const FoldMatrices* null_m) {
  ModelMetrics r;
  r.median_dhat = quantile(m.dhat, 0.5);
  r.mean_dhat = summarize(m.dhat).mean;
  if (!m.derr.empty()) r.median_d = quantile(m.derr, 0.5);
  if (null_m) {
    r.p_superiority = prob_superiority(m.dhat, null_m->dhat);
    r.p_superiority_mean = prob_superiority(m.dhat_mean, null_m->dhat_mean);
    if (!m.derr.empty() && !null_m->derr.empty()) r.p_true = prob_superiority(m.derr, null_m->derr);
  }
  return r;
}

struct CellResult {
  std::string label;
  SecondStage model = SecondStage::dpm;
  std::vector<int> replicates;  // survivors
  std::vector<ModelMetrics> metrics;
  std::vector<std::string> failures;
};

struct GridProgress {
  std::function<void(const std::string&)> log;
};

namespace detail {

inline std::filesystem::path cell_dir(const RunManifest& mf, const std::string& label, int r) {
  return mf.output_dir / "cells" / label / ("rep_" + std::to_string(r + 1));
}

inline void write_metrics_file(const std::filesystem::path& p, const ModelMetrics& m) {
  auto os = io::open_out(p);
  os << "median_dhat,median_d,mean_dhat,p_superiority,p_superiority_mean,p_true,recovery\n"
     << io::fmt(m.median_dhat) << ',' << io::fmt(m.median_d) << ',' << io::fmt(m.mean_dhat) << ','
     << io::fmt(m.p_superiority) << ',' << io::fmt(m.p_superiority_mean) << ',' << io::fmt(m.p_true) << ','
     << io::fmt(m.recovery) << '\n';
  io::close_checked(os, p);
}

inline double parse_metric(std::string_view s, const std::string& where) {
  if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
  return io::parse_double(s, where);
}

inline ModelMetrics read_metrics_file(const std::filesystem::path& p) {
  auto is = io::open_in(p);
  std::string line;
  std::getline(is, line);
  if (!std::getline(is, line)) throw DataError(p.string() + ": missing metrics row");
  const auto f = io::split(line);
  if (f.size() != 7) throw DataError(p.string() + ": malformed metrics row");
  const std::string w = p.string();
  ModelMetrics m;
  m.median_dhat = parse_metric(f[0], w);
  m.median_d = parse_metric(f[1], w);
  m.mean_dhat = parse_metric(f[2], w);
  m.p_superiority = parse_metric(f[3], w);
  m.p_superiority_mean = parse_metric(f[4], w);
  m.p_true = parse_metric(f[5], w);
  m.recovery = parse_metric(f[6], w);
  return m;
}

inline void save_fold_matrices(const std::filesystem::path& dir, const FoldMatrices& m) {
  io::write_matrix_bin(dir / "dhat.bin", m.dhat, m.folds, m.draws);
  io::write_matrix_bin(dir / "dhat_mean.bin", m.dhat_mean, 1, m.draws);
  if (!m.derr.empty()) io::write_matrix_bin(dir / "derr.bin", m.derr, m.folds, m.draws);
}

inline FoldMatrices load_fold_matrices(const std::filesystem::path& dir) {
  FoldMatrices m;
  m.dhat = io::read_matrix_bin(dir / "dhat.bin", m.folds, m.draws);
  int r = 0, c = 0;
  m.dhat_mean = io::read_matrix_bin(dir / "dhat_mean.bin", r, c);
  if (std::filesystem::exists(dir / "derr.bin")) m.derr = io::read_matrix_bin(dir / "derr.bin", r, c);
  return m;
}

inline void touch(const std::filesystem::path& p) {
  auto os = io::open_out(p);
  os << "done\n";
  io::close_checked(os, p);
}

}  // namespace detail

/// One (scenario, replicate) cell: the null model first, then each listed
/// model scored against it. Completed models are skipped on rerun, and every
/// metric is recomputed from what is on disk, so a resumed run reproduces a
/// fresh one exactly.
inline std::vector<std::optional<ModelMetrics>> run_replicate(const RunManifest& mf, const ScenarioConfig& base, int r,
                                                              std::vector<std::string>& failures,
                                                              const GridProgress& progress = {}) {
  ScenarioConfig sc = base;
  const std::string label = sc.label();
  sc.seed = dataset_seed(mf.root_seed, label, r);
  const auto dir = detail::cell_dir(mf, label, r);
  std::vector<std::optional<ModelMetrics>> out(mf.models.size());

  auto all_done = [&] {
    for (auto m : mf.models)
      if (!std::filesystem::exists(dir / to_string(m) / "done")) return false;
    return true;
  };
  if (all_done()) {
    for (std::size_t i = 0; i < mf.models.size(); ++i)
      out[i] = detail::read_metrics_file(dir / to_string(mf.models[i]) / "metrics.csv");
    return out;
  }

  Dataset ds;
  try {
    ds = simulate_dataset(sc, mf.trial);
  } catch (const std::exception& e) {
    failures.push_back(label + " rep " + std::to_string(r + 1) + " simulate: " + e.what());
    return out;
  }
  const auto true_mu = ds.true_mu();
  const bool clusters = has_true_clusters(sc.scenario);

  const auto null_dir = dir / "null";
  if (!std::filesystem::exists(null_dir / "done")) {
    try {
      if (progress.log) progress.log(label + " rep " + std::to_string(r + 1) + " null");
      DpmConfig cfg = mf.dpm;
      cfg.second_stage = SecondStage::null;
      const ModelFit fit = evaluate_model(ds.data, cfg, model_seed(mf.root_seed, label, r, SecondStage::null), mf.jobs);
      const FoldMatrices fm = fold_matrices(fit, true_mu);
      detail::save_fold_matrices(null_dir, fm);
      detail::write_metrics_file(null_dir / "metrics.csv", model_metrics(fm, nullptr));
      detail::touch(null_dir / "done");
    } catch (const std::exception& e) {
      failures.push_back(label + " rep " + std::to_string(r + 1) + " null: " + e.what());
      return out;
    }
  }
  const FoldMatrices null_m = detail::load_fold_matrices(null_dir);

  for (std::size_t i = 0; i < mf.models.size(); ++i) {
    const SecondStage model = mf.models[i];
    const auto mdir = dir / to_string(model);
    if (!std::filesystem::exists(mdir / "done")) {
      try {
        if (progress.log) progress.log(label + " rep " + std::to_string(r + 1) + " " + to_string(model));
        DpmConfig cfg = mf.dpm;
        cfg.second_stage = model;
        const ModelFit fit = evaluate_model(ds.data, cfg, model_seed(mf.root_seed, label, r, model), mf.jobs);
        ModelMetrics mm = model_metrics(fold_matrices(fit, true_mu), &null_m);
        if (clusters && model == SecondStage::dpm) mm.recovery = cluster_recovery(fit.folds, ds.true_clusters());
        detail::write_metrics_file(mdir / "metrics.csv", mm);
        detail::touch(mdir / "done");
      } catch (const std::exception& e) {
        failures.push_back(label + " rep " + std::to_string(r + 1) + " " + to_string(model) + ": " + e.what());
        continue;
      }
    }
    out[i] = detail::read_metrics_file(mdir / "metrics.csv");
  }
  return out;
}

struct GridResult {
  std::vector<CellResult> cells;  // scenario-major, models in manifest order
  std::vector<std::string> failures;
};

inline GridResult run_grid(const RunManifest& mf, const GridProgress& progress = {}) {
  mf.validate();
  GridResult g;
  for (const auto& sc : mf.scenarios) {
    std::vector<CellResult> cells(mf.models.size());
    for (std::size_t i = 0; i < mf.models.size(); ++i) {
      cells[i].label = sc.label();
      cells[i].model = mf.models[i];
    }
    for (int r = 0; r < mf.n_replicates; ++r) {
      const auto res = run_replicate(mf, sc, r, g.failures, progress);
      for (std::size_t i = 0; i < res.size(); ++i)
        if (res[i]) {
          cells[i].replicates.push_back(r);
          cells[i].metrics.push_back(*res[i]);
        }
    }
    for (auto& c : cells) g.cells.push_back(std::move(c));
  }
  return g;
}

struct MeanSd {
  int n = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
};

inline MeanSd mean_sd(const std::vector<ModelMetrics>& ms, double ModelMetrics::*field) {
  std::vector<double> v;
  for (const auto& m : ms)
    if (std::isfinite(m.*field)) v.push_back(m.*field);
  MeanSd out;
  out.n = static_cast<int>(v.size());
  if (v.empty()) return out;
  const Summary s = summarize(v);
  out.mean = s.mean;
  out.sd = s.sd;
  return out;
}

/// table1.csv (D^, D), table2.csv (superiority), recovery.csv, failures.txt.
inline void write_grid_tables(const std::filesystem::path& dir, const GridResult& g) {
  {
    const auto p = dir / "table1.csv";
    auto os = io::open_out(p);
    os << "scenario,model,n,median_dhat_mean,median_dhat_sd,median_d_mean,median_d_sd\n";
    for (const auto& c : g.cells) {
      const auto a = mean_sd(c.metrics, &ModelMetrics::median_dhat);
      const auto b = mean_sd(c.metrics, &ModelMetrics::median_d);
      os << c.label << ',' << to_string(c.model) << ',' << c.metrics.size() << ',' << io::fmt(a.mean) << ','
         << io::fmt(a.sd) << ',' << io::fmt(b.mean) << ',' << io::fmt(b.sd) << '\n';
    }
    io::close_checked(os, p);
  }
  {
    const auto p = dir / "table2.csv";
    auto os = io::open_out(p);
    os << "scenario,model,n,p_mean,p_sd,p_true_mean,p_true_sd,p_iteration_mean,p_iteration_sd\n";
    for (const auto& c : g.cells) {
      const auto a = mean_sd(c.metrics, &ModelMetrics::p_superiority);
      const auto b = mean_sd(c.metrics, &ModelMetrics::p_true);
      const auto d = mean_sd(c.metrics, &ModelMetrics::p_superiority_mean);
      os << c.label << ',' << to_string(c.model) << ',' << c.metrics.size() << ',' << io::fmt(a.mean) << ','
         << io::fmt(a.sd) << ',' << io::fmt(b.mean) << ',' << io::fmt(b.sd) << ',' << io::fmt(d.mean) << ','
         << io::fmt(d.sd) << '\n';
    }
    io::close_checked(os, p);
  }
  {
    const auto p = dir / "recovery.csv";
    auto os = io::open_out(p);
    os << "scenario,n,mean,sd\n";
    for (const auto& c : g.cells) {
      if (c.model != SecondStage::dpm) continue;
      const auto a = mean_sd(c.metrics, &ModelMetrics::recovery);
      if (a.n == 0) continue;
      os << c.label << ',' << a.n << ',' << io::fmt(a.mean) << ',' << io::fmt(a.sd) << '\n';
    }
    io::close_checked(os, p);
  }
  {
    const auto p = dir / "failures.txt";
    auto os = io::open_out(p);
    for (const auto& f : g.failures) os << f << '\n';
    io::close_checked(os, p);
  }
}

// ---------------------------------------------------------------------------
// Illustrative example

struct ExampleResult {
  Dataset dataset;
  int target = 8;  // 0-based group whose outcomes are withheld
  ModelFit dpm, null;
  std::vector<int> partition;  // Dahl estimate from the dpm reference fit
  QualityReport report;
  std::vector<double> target_mu;      // mu~ draws for the target
  std::vector<int> target_labels;     // its cluster label per draw
  std::vector<char> target_correct;   // per draw: in the high-value cluster
  double correct_rate = 0.0;
  int good_cluster = -1, bad_cluster = -1;  // Dahl clusters, 0-based
  double prediction_median = 0.0, interval_lower = 0.0, interval_upper = 0.0;
  double censored_fraction = 0.0;
};

namespace detail {

// Plurality label among `members` in one draw (ties: smallest label).
inline int plurality_label(const std::vector<int>& labels, const std::vector<int>& members) {
  std::vector<int> count(labels.size() + 1, 0);
  for (int i : members) count[labels[i]]++;
  return static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
}

}  // namespace detail

/// The twotrt example with censoring. Group `target`'s outcomes are removed
/// from every fit; the remaining groups form the leave-one-out folds.
inline ExampleResult run_example(std::uint64_t seed, const DpmConfig& base_cfg, TrialConfig tc, int jobs = 1,
                                 int target = 8, const GridProgress& progress = {}) {
  ExampleResult ex;
  ex.target = target;
  ScenarioConfig sc;
  sc.scenario = Scenario::twotrt;
  sc.c_z = 0.0;
  sc.c_u = 0.0;
  const std::string label = sc.label() + "-censored";
  sc.seed = dataset_seed(seed, label, 0);
  if (!tc.censor) tc.censor = Censoring{};
  ex.dataset = simulate_dataset(sc, tc);
  if (target < 0 || target >= ex.dataset.data.n_groups()) throw DomainError("example: target group out of range");
  ex.dataset.data.masked = {target};
  {
    int cens = 0;
    for (const auto& s : ex.dataset.data.subjects) cens += s.event ? 0 : 1;
    ex.censored_fraction = static_cast<double>(cens) / ex.dataset.data.subjects.size();
  }

  DpmConfig cfg = base_cfg;
  cfg.second_stage = SecondStage::dpm;
  if (progress.log) progress.log("example dpm");
  ex.dpm = evaluate_model(ex.dataset.data, cfg, model_seed(seed, label, 0, SecondStage::dpm), jobs);
  cfg.second_stage = SecondStage::null;
  if (progress.log) progress.log("example null");
  ex.null = evaluate_model(ex.dataset.data, cfg, model_seed(seed, label, 0, SecondStage::null), jobs);

  ex.partition = dahl_cluster_estimate(label_draws(ex.dpm.reference));
  const auto true_mu = ex.dataset.true_mu();
  ex.report = subgroup_summaries(ex.dpm, ex.partition, group_meta(ex.dataset.data), &ex.null, true_mu);

  const auto tcl = ex.dataset.true_clusters();
  std::vector<int> high, low;
  for (int j = 0; j < ex.dataset.data.n_groups(); ++j) {
    if (j == target) continue;
    (tcl[j] == 1 ? high : low).push_back(j);
  }
  const auto& ref = ex.dpm.reference;
  int hits = 0;
  for (const auto& d : ref.draws) {
    const auto& lab = d.clusters.labels;
    const int h = detail::plurality_label(lab, high);
    const int l = detail::plurality_label(lab, low);
    const bool target_high = tcl[target] == 1;
    const int want = target_high ? h : l;
    const int other = target_high ? l : h;
    const bool ok = lab[target] == want && want != other;
    ex.target_mu.push_back(d.mu(target));
    ex.target_labels.push_back(lab[target]);
    ex.target_correct.push_back(ok ? 1 : 0);
    hits += ok ? 1 : 0;
  }
  ex.correct_rate = ref.size() > 0 ? static_cast<double>(hits) / ref.size() : 0.0;

  // Good / bad clusters: the Dahl clusters holding the most high- and
  // low-value groups respectively.
  const int k = *std::max_element(ex.partition.begin(), ex.partition.end()) + 1;
  std::vector<int> n_high(k, 0), n_low(k, 0);
  for (int j : high) n_high[ex.partition[j]]++;
  for (int j : low) n_low[ex.partition[j]]++;
  ex.good_cluster = static_cast<int>(std::max_element(n_high.begin(), n_high.end()) - n_high.begin());
  ex.bad_cluster = static_cast<int>(std::max_element(n_low.begin(), n_low.end()) - n_low.begin());

  ex.prediction_median = quantile(ex.target_mu, 0.5);
  const auto& pc = ex.report.per_cluster;
  const int tc_label = ex.partition[target];
  const double err = tc_label < static_cast<int>(pc.size()) && pc[tc_label].dhat.n > 0 ? pc[tc_label].dhat.median
                                                                                     : ex.report.dhat_pooled.median;
  ex.interval_lower = ex.prediction_median - err;
  ex.interval_upper = ex.prediction_median + err;
  return ex;
}

}  // namespace dpsurr
