#pragma once

// Report and manifest serialization (JSON via nlohmann::json) and the
// delimited side tables that accompany a report.
//
// Report keys are stable: see README "Output files".

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dpm.hpp"
#include "io.hpp"
#include "study.hpp"
#include "surrogacy.hpp"

namespace dpsurr {

using json = nlohmann::ordered_json;

inline json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const Summary& s) {
  return json{{"n", s.n},           {"mean", num_or_null(s.mean)}, {"sd", num_or_null(s.sd)},
              {"q025", num_or_null(s.q025)}, {"q25", num_or_null(s.q25)},   {"median", num_or_null(s.median)},
              {"q75", num_or_null(s.q75)},   {"q975", num_or_null(s.q975)}};
}

inline json to_json(const SubgroupSummary& s) {
  std::vector<int> g;
  for (int j : s.groups) g.push_back(j + 1);
  return json{{"key", s.key},
              {"groups", g},
              {"dhat", to_json(s.dhat)},
              {"p_superiority", num_or_null(s.p_superiority)},
              {"flagged", s.flagged}};
}

inline json to_json(const QualityReport& r) {
  json j;
  j["model"] = r.model;
  j["n_groups"] = r.n_groups;
  j["n_folds"] = r.n_folds;
  j["n_draws"] = r.n_draws;
  j["dhat"] = to_json(r.dhat);
  j["dhat_pooled"] = to_json(r.dhat_pooled);
  j["dhat0"] = r.dhat0 ? to_json(*r.dhat0) : json(nullptr);
  j["dhat0_pooled"] = r.dhat0_pooled ? to_json(*r.dhat0_pooled) : json(nullptr);
  j["p_superiority"] = r.p_superiority ? num_or_null(*r.p_superiority) : json(nullptr);
  j["p_superiority_mean"] = r.p_superiority_mean ? num_or_null(*r.p_superiority_mean) : json(nullptr);
  j["d_true"] = r.d_true ? to_json(*r.d_true) : json(nullptr);
  j["d0_true"] = r.d0_true ? to_json(*r.d0_true) : json(nullptr);
  j["p_true"] = r.p_true ? num_or_null(*r.p_true) : json(nullptr);
  std::vector<int> part;
  for (int c : r.estimated_partition) part.push_back(c + 1);
  j["estimated_partition"] = part;
  auto arr = [](const std::vector<SubgroupSummary>& v) {
    json a = json::array();
    for (const auto& s : v) a.push_back(to_json(s));
    return a;
  };
  j["per_cluster"] = arr(r.per_cluster);
  j["per_treatment"] = arr(r.per_treatment);
  j["per_biomarker"] = arr(r.per_biomarker);
  j["per_z"] = arr(r.per_z);
  return j;
}

inline void write_json(const std::filesystem::path& p, const json& j) {
  auto os = io::open_out(p);
  os << j.dump(2) << '\n';
  io::close_checked(os, p);
}

inline void write_group_table(const std::filesystem::path& p, const QualityReport& r) {
  auto os = io::open_out(p);
  os << "j,loo_median,loo_q025,loo_q975,full_median,cluster,interval_lower,interval_upper,true_mu\n";
  for (const auto& g : r.per_group) {
    os << g.j + 1 << ',' << io::fmt(g.loo_median) << ',' << io::fmt(g.loo_q025) << ',' << io::fmt(g.loo_q975) << ','
       << io::fmt(g.full_median) << ',' << g.cluster + 1 << ',' << io::fmt(g.interval_lower) << ','
       << io::fmt(g.interval_upper) << ',' << (g.true_mu ? io::fmt(*g.true_mu) : std::string("NA")) << '\n';
  }
  io::close_checked(os, p);
}

inline void write_cluster_table(const std::filesystem::path& p, const QualityReport& r) {
  auto os = io::open_out(p);
  os << "cluster,n_groups,dhat_median,dhat_q025,dhat_q975,p_superiority,flagged\n";
  for (std::size_t c = 0; c < r.per_cluster.size(); ++c) {
    const auto& s = r.per_cluster[c];
    os << c + 1 << ',' << s.groups.size() << ',' << io::fmt(s.dhat.median) << ',' << io::fmt(s.dhat.q025) << ','
       << io::fmt(s.dhat.q975) << ',' << io::fmt(s.p_superiority) << ',' << (s.flagged ? 1 : 0) << '\n';
  }
  io::close_checked(os, p);
}

/// Density grid for D^ and (optionally) D^0 on [0, upper] with 256 points.
inline void write_density_grid(const std::filesystem::path& p, const std::vector<double>& dhat,
                               const std::vector<double>* dhat0) {
  double upper = quantile(dhat, 0.995);
  if (dhat0) upper = std::max(upper, quantile(*dhat0, 0.995));
  if (!(upper > 0.0)) upper = 1.0;
  const int n = 256;
  std::vector<double> grid(n);
  for (int i = 0; i < n; ++i) grid[i] = upper * i / (n - 1);
  const auto f = density_on_grid(dhat, grid);
  std::vector<double> f0;
  if (dhat0) f0 = density_on_grid(*dhat0, grid);
  auto os = io::open_out(p);
  os << "x,density_dhat" << (dhat0 ? ",density_dhat0" : "") << '\n';
  for (int i = 0; i < n; ++i) {
    os << io::fmt(grid[i]) << ',' << io::fmt(f[i]);
    if (dhat0) os << ',' << io::fmt(f0[i]);
    os << '\n';
  }
  io::close_checked(os, p);
}

// ---------------------------------------------------------------------------
// Manifest

inline json to_json(const RunManifest& m) {
  json j;
  j["root_seed"] = m.root_seed;
  j["n_replicates"] = m.n_replicates;
  j["jobs"] = m.jobs;
  j["output_dir"] = m.output_dir.string();
  json sc = json::array();
  for (const auto& s : m.scenarios)
    sc.push_back(json{{"scenario", std::string(to_string(s.scenario))}, {"c_z", s.c_z}, {"c_u", s.c_u}});
  j["scenarios"] = sc;
  json models = json::array();
  for (auto x : m.models) models.push_back(to_string(x));
  j["models"] = models;
  j["chain"] = json{{"n_iter", m.dpm.chain.n_iter},
                    {"burn_in", m.dpm.chain.burn_in},
                    {"thin", m.dpm.chain.thin},
                    {"k_init", m.dpm.chain.k_init}};
  j["dpm"] = json{{"alpha_shape", m.dpm.alpha_prior.shape},
                  {"alpha_rate", m.dpm.alpha_prior.rate},
                  {"n_aux", m.dpm.n_aux},
                  {"paper_literal_alpha", m.dpm.paper_literal_alpha},
                  {"scale_matrix_inverted", m.dpm.scale_matrix_inverted},
                  {"tau", m.dpm.tau},
                  {"nuisance_cov", m.dpm.nuisance_cov},
                  {"precision_shape", m.dpm.precision_prior.shape},
                  {"precision_rate", m.dpm.precision_prior.rate},
                  {"simple_coef_var", m.dpm.simple_coef_var}};
  j["trial"] = json{{"batch_size", m.trial.batch_size},
                    {"horizon", m.trial.horizon},
                    {"min_group_size", m.trial.min_group_size},
                    {"censor", m.trial.censor.has_value()}};
  return j;
}

/// Reads a manifest; absent keys keep their defaults.
inline RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  m.dpm = simulation_dpm_config();
  m.root_seed = j.value("root_seed", m.root_seed);
  m.n_replicates = j.value("n_replicates", m.n_replicates);
  m.jobs = j.value("jobs", m.jobs);
  m.output_dir = j.value("output_dir", m.output_dir.string());
  if (j.contains("scenarios")) {
    for (const auto& s : j.at("scenarios")) {
      ScenarioConfig sc;
      sc.scenario = parse_scenario(s.at("scenario").get<std::string>());
      sc.c_z = s.value("c_z", 0.0);
      sc.c_u = s.value("c_u", 0.0);
      m.scenarios.push_back(sc);
    }
  }
  if (j.contains("models")) {
    m.models.clear();
    for (const auto& x : j.at("models")) m.models.push_back(parse_second_stage(x.get<std::string>()));
  }
  if (j.contains("chain")) {
    const auto& c = j.at("chain");
    m.dpm.chain.n_iter = c.value("n_iter", m.dpm.chain.n_iter);
    m.dpm.chain.burn_in = c.value("burn_in", m.dpm.chain.burn_in);
    m.dpm.chain.thin = c.value("thin", m.dpm.chain.thin);
    m.dpm.chain.k_init = c.value("k_init", m.dpm.chain.k_init);
  }
  if (j.contains("dpm")) {
    const auto& d = j.at("dpm");
    m.dpm.alpha_prior.shape = d.value("alpha_shape", m.dpm.alpha_prior.shape);
    m.dpm.alpha_prior.rate = d.value("alpha_rate", m.dpm.alpha_prior.rate);
    m.dpm.n_aux = d.value("n_aux", m.dpm.n_aux);
    m.dpm.paper_literal_alpha = d.value("paper_literal_alpha", m.dpm.paper_literal_alpha);
    m.dpm.scale_matrix_inverted = d.value("scale_matrix_inverted", m.dpm.scale_matrix_inverted);
    m.dpm.tau = d.value("tau", m.dpm.tau);
    m.dpm.nuisance_cov = d.value("nuisance_cov", m.dpm.nuisance_cov);
    m.dpm.precision_prior.shape = d.value("precision_shape", m.dpm.precision_prior.shape);
    m.dpm.precision_prior.rate = d.value("precision_rate", m.dpm.precision_prior.rate);
    m.dpm.simple_coef_var = d.value("simple_coef_var", m.dpm.simple_coef_var);
  }
  if (j.contains("trial")) {
    const auto& t = j.at("trial");
    m.trial.batch_size = t.value("batch_size", m.trial.batch_size);
    m.trial.horizon = t.value("horizon", m.trial.horizon);
    m.trial.min_group_size = t.value("min_group_size", m.trial.min_group_size);
    if (t.value("censor", false)) m.trial.censor = Censoring{};
  }
  return m;
}

inline RunManifest load_manifest(const std::filesystem::path& p) {
  auto is = io::open_in(p);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
  try {
    return manifest_from_json(j);
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Bundles

/// Report directory for one model fit on one dataset.
inline void write_evaluation(const std::filesystem::path& dir, const ModelFit& fit, const ModelFit* null_fit,
                             const QualityReport& report, bool dump_posterior = true) {
  write_json(dir / "report.json", to_json(report));
  write_group_table(dir / "groups.csv", report);
  write_cluster_table(dir / "clusters.csv", report);
  const auto dp = pooled_dhat(fit.folds);
  if (null_fit) {
    const auto dp0 = pooled_dhat(null_fit->folds);
    write_density_grid(dir / "density.csv", dp, &dp0);
  } else {
    write_density_grid(dir / "density.csv", dp, nullptr);
  }
  if (dump_posterior) {
    const auto p = dir / "posterior.csv";
    auto os = io::open_out(p);
    write_posterior_dump(os, fit.reference);
    io::close_checked(os, p);
  }
}

inline json example_summary(const ExampleResult& ex) {
  json j;
  j["target_group"] = ex.target + 1;
  j["censored_fraction"] = ex.censored_fraction;
  j["target_high_value_rate"] = ex.correct_rate;
  j["prediction"] = json{{"median", ex.prediction_median},
                         {"interval_lower", ex.interval_lower},
                         {"interval_upper", ex.interval_upper}};
  if (!ex.dataset.truth.empty()) j["prediction"]["true_mu"] = ex.dataset.truth[ex.target].mu;
  j["good_cluster"] = ex.good_cluster + 1;
  j["bad_cluster"] = ex.bad_cluster + 1;
  j["report"] = to_json(ex.report);
  return j;
}

inline void write_example(const std::filesystem::path& dir, const ExampleResult& ex) {
  write_dataset_dir(dir / "data", ex.dataset);
  write_json(dir / "example.json", example_summary(ex));
  write_evaluation(dir / "dpm", ex.dpm, &ex.null, ex.report);
  {
    const auto p = dir / "target_trace.csv";
    auto os = io::open_out(p);
    os << "draw,mu,cluster,high_value\n";
    for (std::size_t t = 0; t < ex.target_mu.size(); ++t)
      os << t + 1 << ',' << io::fmt(ex.target_mu[t]) << ',' << ex.target_labels[t] + 1 << ','
         << static_cast<int>(ex.target_correct[t]) << '\n';
    io::close_checked(os, p);
  }
  {
    // Plot data: every group's posterior median effects with the estimated
    // cluster; the target's outcome effect is its prediction.
    const auto p = dir / "effects.csv";
    auto os = io::open_out(p);
    os << "j,nu_median,mu_median,cluster,target,interval_lower,interval_upper\n";
    const auto& ref = ex.dpm.reference;
    for (int j = 0; j < ref.n_groups; ++j) {
      std::vector<double> nu, mu;
      for (const auto& d : ref.draws) {
        nu.push_back(d.nu(j));
        mu.push_back(d.mu(j));
      }
      const bool tgt = j == ex.target;
      os << j + 1 << ',' << io::fmt(quantile(nu, 0.5)) << ',' << io::fmt(quantile(mu, 0.5)) << ','
         << ex.partition[j] + 1 << ',' << (tgt ? 1 : 0) << ',' << (tgt ? io::fmt(ex.interval_lower) : "NA") << ','
         << (tgt ? io::fmt(ex.interval_upper) : "NA") << '\n';
    }
    io::close_checked(os, p);
  }
}

}  // namespace dpsurr
