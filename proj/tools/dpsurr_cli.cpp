// dpsurr: simulate trials, evaluate surrogates, run the replicated study.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <dpsurr/dpsurr.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace dpsurr;

namespace {

struct ChainFlags {
  int n_iter = 4000, burn_in = 2000, thin = 2, k_init = 8, n_aux = 1;
  double alpha_shape = 2.0, alpha_rate = 4.0;
  double tau = 2.0, nuisance_cov = 0.05;
  bool literal_alpha = false, scale_inverted = false;

  void add(CLI::App* app) {
    app->add_option("--n-iter", n_iter, "Sweeps per chain")->capture_default_str();
    app->add_option("--burn-in", burn_in, "Discarded leading sweeps")->capture_default_str();
    app->add_option("--thin", thin, "Keep every thin-th sweep")->capture_default_str();
    app->add_option("--k-init", k_init, "Initial k-means clusters")->capture_default_str();
    app->add_option("--n-aux", n_aux, "Auxiliary components per assignment step")->capture_default_str();
    app->add_option("--alpha-shape", alpha_shape, "Gamma prior shape for the concentration")->capture_default_str();
    app->add_option("--alpha-rate", alpha_rate, "Gamma prior rate for the concentration")->capture_default_str();
    app->add_option("--tau", tau, "Prior variance of the biomarker main effects")->capture_default_str();
    app->add_option("--nuisance-cov", nuisance_cov, "Prior covariance of the biomarker main effects")
        ->capture_default_str();
    app->add_flag("--paper-literal-alpha", literal_alpha, "Use the a+k+1 mixture weight in the concentration update");
    app->add_flag("--scale-matrix-inverted", scale_inverted, "Base-measure scale matrix = diag(variances)");
  }

  void apply(DpmConfig& c) const {
    c.chain.n_iter = n_iter;
    c.chain.burn_in = burn_in;
    c.chain.thin = thin;
    c.chain.k_init = k_init;
    c.n_aux = n_aux;
    c.alpha_prior = {alpha_shape, alpha_rate};
    c.tau = tau;
    c.nuisance_cov = nuisance_cov;
    c.paper_literal_alpha = literal_alpha;
    c.scale_matrix_inverted = scale_inverted;
  }
};

void log_line(const std::string& s) {
  static const auto t0 = std::chrono::steady_clock::now();
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::fprintf(stderr, "[%8.1fs] %s\n", sec, s.c_str());
}

std::vector<ScenarioConfig> scenario_grid(const std::vector<std::string>& names, const std::vector<double>& cz,
                                          const std::vector<double>& cu) {
  std::vector<ScenarioConfig> out;
  for (const auto& n : names)
    for (double z : cz)
      for (double u : cu) {
        ScenarioConfig sc;
        sc.scenario = parse_scenario(n);
        sc.c_z = z;
        sc.c_u = u;
        out.push_back(sc);
      }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surrogate evaluation with Dirichlet-process mixtures for adaptive platform trials"};
  app.require_subcommand(1);

  // simulate ---------------------------------------------------------------
  auto* sim = app.add_subcommand("simulate", "Write simulated datasets and truth sidecars");
  std::string sim_manifest;
  std::vector<std::string> sim_scen{"linear"};
  std::vector<double> sim_cz{0.0}, sim_cu{0.0};
  int sim_reps = 1;
  std::uint64_t sim_seed = 20240501;
  std::string sim_out = "datasets";
  bool sim_censor = false;
  sim->add_option("--manifest", sim_manifest, "JSON manifest (overrides the grid flags)");
  sim->add_option("--scenario", sim_scen, "Scenario names")->capture_default_str();
  sim->add_option("--c-z", sim_cz, "Observed covariate coefficients")->capture_default_str();
  sim->add_option("--c-u", sim_cu, "Latent covariate coefficients")->capture_default_str();
  sim->add_option("--replicates", sim_reps, "Replicates per scenario")->capture_default_str();
  sim->add_option("--seed", sim_seed, "Root seed")->capture_default_str();
  sim->add_option("--out", sim_out, "Output directory")->capture_default_str();
  sim->add_flag("--censor", sim_censor, "Independent Uniform(20, 60] censoring");

  // evaluate ---------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "Leave-one-out evaluation of one dataset");
  std::string ev_data, ev_out = "evaluation", ev_model = "dpm";
  std::uint64_t ev_seed = 20240501;
  int ev_jobs = 1;
  bool ev_no_null = false, ev_plug_in = false, ev_no_dump = false;
  std::vector<int> ev_mask;
  ChainFlags ev_chain;
  ev->add_option("--data", ev_data, "Dataset directory (dataset.csv, covariates.csv[, truth.csv])")->required();
  ev->add_option("--model", ev_model, "dpm, simple or null")->capture_default_str();
  ev->add_option("--seed", ev_seed, "Root seed")->capture_default_str();
  ev->add_option("--jobs", ev_jobs, "Worker threads")->capture_default_str();
  ev->add_option("--out", ev_out, "Output directory")->capture_default_str();
  ev->add_option("--mask", ev_mask, "Groups (1-based) whose outcomes are withheld from every fit");
  ev->add_flag("--no-null", ev_no_null, "Skip the null-model comparison");
  ev->add_flag("--plug-in", ev_plug_in, "Use the reference posterior mean instead of matched draws");
  ev->add_flag("--no-posterior-dump", ev_no_dump, "Do not write posterior.csv");
  ev_chain.add(ev);

  // replicate --------------------------------------------------------------
  auto* rep = app.add_subcommand("replicate", "Replicated scenario grid with error and superiority tables");
  std::string rep_manifest;
  std::vector<std::string> rep_scen{"linear"};
  std::vector<double> rep_cz{0.0}, rep_cu{0.0};
  int rep_reps = 20, rep_jobs = 1;
  std::uint64_t rep_seed = 20240501;
  std::string rep_out = "study";
  ChainFlags rep_chain;
  rep->add_option("--manifest", rep_manifest, "JSON manifest (overrides the grid flags)");
  rep->add_option("--scenario", rep_scen, "Scenario names")->capture_default_str();
  rep->add_option("--c-z", rep_cz, "Observed covariate coefficients")->capture_default_str();
  rep->add_option("--c-u", rep_cu, "Latent covariate coefficients")->capture_default_str();
  rep->add_option("--replicates", rep_reps, "Replicates per scenario")->capture_default_str();
  rep->add_option("--seed", rep_seed, "Root seed")->capture_default_str();
  rep->add_option("--jobs", rep_jobs, "Worker threads")->capture_default_str();
  rep->add_option("--out", rep_out, "Output directory")->capture_default_str();
  rep_chain.add(rep);

  // example ----------------------------------------------------------------
  auto* exa = app.add_subcommand("example", "Censored two-treatment example with one withheld group");
  std::uint64_t ex_seed = 20240501;
  int ex_jobs = 1, ex_target = 9;
  std::string ex_out = "example";
  ChainFlags ex_chain;
  exa->add_option("--seed", ex_seed, "Root seed")->capture_default_str();
  exa->add_option("--jobs", ex_jobs, "Worker threads")->capture_default_str();
  exa->add_option("--target", ex_target, "Withheld group (1-based)")->capture_default_str();
  exa->add_option("--out", ex_out, "Output directory")->capture_default_str();
  ex_chain.add(exa);

  // report -----------------------------------------------------------------
  auto* rpt = app.add_subcommand("report", "Aggregate completed cells of a replicate run");
  std::string rpt_manifest;
  rpt->add_option("--manifest", rpt_manifest, "Manifest of the run (its output_dir is read)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*sim) {
      RunManifest mf;
      if (!sim_manifest.empty()) {
        mf = load_manifest(sim_manifest);
      } else {
        mf.scenarios = scenario_grid(sim_scen, sim_cz, sim_cu);
        mf.n_replicates = sim_reps;
        mf.root_seed = sim_seed;
        mf.output_dir = sim_out;
        if (sim_censor) mf.trial.censor = Censoring{};
      }
      mf.validate();
      for (const auto& base : mf.scenarios) {
        for (int r = 0; r < mf.n_replicates; ++r) {
          ScenarioConfig sc = base;
          sc.seed = dataset_seed(mf.root_seed, sc.label(), r);
          const Dataset ds = simulate_dataset(sc, mf.trial);
          write_dataset_dir(mf.output_dir / sc.label() / ("rep_" + std::to_string(r + 1)), ds);
        }
      }
      write_json(mf.output_dir / "manifest.json", to_json(mf));
      return 0;
    }

    if (*ev) {
      Dataset ds = read_dataset_dir(ev_data);
      for (int g : ev_mask) {
        if (g < 1 || g > ds.data.n_groups()) throw DataError("--mask: group " + std::to_string(g) + " out of range");
        ds.data.masked.push_back(g - 1);
      }
      DpmConfig cfg;
      ev_chain.apply(cfg);
      cfg.second_stage = parse_second_stage(ev_model);
      const std::string label = "evaluate";
      log_line("evaluate " + ev_model);
      const ModelFit fit = evaluate_model(ds.data, cfg, model_seed(ev_seed, label, 0, cfg.second_stage), ev_jobs,
                                          ev_plug_in);
      std::optional<ModelFit> null_fit;
      if (!ev_no_null && cfg.second_stage != SecondStage::null) {
        log_line("evaluate null");
        DpmConfig ncfg = cfg;
        ncfg.second_stage = SecondStage::null;
        null_fit = evaluate_model(ds.data, ncfg, model_seed(ev_seed, label, 0, SecondStage::null), ev_jobs,
                                  ev_plug_in);
      }
      const auto partition = dahl_cluster_estimate(label_draws(fit.reference));
      const auto true_mu = ds.truth.empty() ? std::vector<double>{} : ds.true_mu();
      const QualityReport report = subgroup_summaries(fit, partition, group_meta(ds.data),
                                                      null_fit ? &*null_fit : nullptr, true_mu);
      write_evaluation(ev_out, fit, null_fit ? &*null_fit : nullptr, report, !ev_no_dump);
      log_line("wrote " + ev_out);
      return 0;
    }

    if (*rep) {
      RunManifest mf;
      if (!rep_manifest.empty()) {
        mf = load_manifest(rep_manifest);
      } else {
        mf.dpm = simulation_dpm_config();
        rep_chain.apply(mf.dpm);
        mf.scenarios = scenario_grid(rep_scen, rep_cz, rep_cu);
        mf.n_replicates = rep_reps;
        mf.root_seed = rep_seed;
        mf.output_dir = rep_out;
        mf.jobs = rep_jobs;
      }
      mf.validate();
      write_json(mf.output_dir / "manifest.json", to_json(mf));
      GridProgress progress{log_line};
      const GridResult g = run_grid(mf, progress);
      write_grid_tables(mf.output_dir, g);
      log_line("wrote tables to " + mf.output_dir.string());
      if (!g.failures.empty()) {
        for (const auto& f : g.failures) std::cerr << "failed: " << f << '\n';
        return 2;
      }
      return 0;
    }

    if (*exa) {
      DpmConfig cfg = simulation_dpm_config();
      ex_chain.apply(cfg);
      TrialConfig tc;
      tc.censor = Censoring{};
      GridProgress progress{log_line};
      const ExampleResult ex = run_example(ex_seed, cfg, tc, ex_jobs, ex_target - 1, progress);
      write_example(ex_out, ex);
      std::printf("target group %d: high-value cluster rate %.3f, median prediction %.3f [%.3f, %.3f]\n",
                  ex.target + 1, ex.correct_rate, ex.prediction_median, ex.interval_lower, ex.interval_upper);
      std::printf("median D^ %.3f, median D^0 %.3f, P(D^ < D^0) %.3f\n", ex.report.dhat_pooled.median,
                  ex.report.dhat0_pooled ? ex.report.dhat0_pooled->median : std::nan(""),
                  ex.report.p_superiority.value_or(std::nan("")));
      return 0;
    }

    if (*rpt) {
      const RunManifest mf = load_manifest(rpt_manifest);
      GridResult g;
      for (const auto& sc : mf.scenarios) {
        for (auto model : mf.models) {
          CellResult c;
          c.label = sc.label();
          c.model = model;
          for (int r = 0; r < mf.n_replicates; ++r) {
            const auto d = mf.output_dir / "cells" / c.label / ("rep_" + std::to_string(r + 1)) / to_string(model);
            if (!fs::exists(d / "done")) {
              g.failures.push_back(c.label + " rep " + std::to_string(r + 1) + " " + to_string(model) +
                                   ": not completed");
              continue;
            }
            c.replicates.push_back(r);
            c.metrics.push_back(detail::read_metrics_file(d / "metrics.csv"));
          }
          g.cells.push_back(std::move(c));
        }
      }
      write_grid_tables(mf.output_dir, g);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
