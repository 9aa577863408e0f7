// Acceptance checks. One PASS/FAIL line per criterion; indented lines carry
// the measured values. The replicate grids resume from --out.

#include <CLI11.hpp>
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace dpsurr;
using namespace dpsurr::testing;
namespace fs = std::filesystem;

namespace {

int n_fail = 0;

void verdict(const std::string& id, bool ok, const std::string& what) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", id.c_str(), what.c_str());
  std::fflush(stdout);
  if (!ok) ++n_fail;
}

template <class... A>
void detail_line(const char* f, A... a) {
  std::printf("    ");
  std::printf(f, a...);
  std::printf("\n");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void log_line(const std::string& s) { std::fprintf(stderr, "  .. %s\n", s.c_str()); }

// Published cell values.
struct PublishedCell {
  double dhat_dpm, dhat_simple, p_dpm, p_simple;
};
const std::map<std::string, PublishedCell> kPublished = {
    {"linear", {0.26, 0.40, 0.80, 0.84}},   {"simple", {0.25, 0.39, 0.80, 0.84}},
    {"nonlinear", {0.43, 0.64, 0.72, 0.68}}, {"null", {0.51, 0.84, 0.21, 0.12}},
    {"inter", {0.32, 0.80, 0.58, 0.43}},     {"manybiom", {0.44, 1.82, 0.62, 0.30}},
};

// ---------------------------------------------------------------------------

void criterion_gold() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto x = gold_points();
  const auto base = gold_base();
  const double alpha = 1.0;
  const auto exact = partition_posterior(x, base, alpha);
  Rng rng(derive_seed(2024, {1}));
  const auto freq = sampled_partitions(x, base, alpha, 100000, 1000, rng);
  const double tv = total_variation(exact, freq);
  const double sec = seconds_since(t0);
  detail_line("partitions enumerated %zu, visited %zu", exact.size(), freq.size());
  detail_line("TV %.4f (limit 0.05), %.1f s (limit 60)", tv, sec);
  verdict("1", tv < 0.05 && sec < 60.0, "partition posterior vs enumeration over 15 partitions");
}

void criterion_crp() {
  bool ok = true;
  for (double alpha : {0.5, 1.0, 3.0}) {
    Rng rng(derive_seed(2024, {2, static_cast<std::uint64_t>(alpha * 10)}));
    const double got = crp_mean_clusters(alpha, 64, 10000, 500, rng);
    const double want = crp_expected_clusters(alpha, 64);
    const double rel = std::abs(got / want - 1.0);
    detail_line("alpha %.1f: mean k %.4f, expected %.4f, rel err %.4f", alpha, got, want, rel);
    ok &= rel < 0.02;
  }
  verdict("2", ok, "cluster count under a constant likelihood within 2% of the CRP expectation");
}

void criterion_conjugacy() {
  double err_post = 0.0, err_marg = 0.0, err_cond = 0.0;
  {
    const auto prior = niw1(0.0, 1.0, 3.0, 1.0);
    const double x = 2.0;
    Grid2 g;
    g.center = 1.0;
    auto unnorm = [&](double m, double v) {
      return std::exp(niw1_logpdf(m, v, prior) + normal_logpdf(x, m, std::sqrt(v)));
    };
    const double z = g.integrate(unnorm);
    const double em = g.integrate([&](double m, double v) { return m * unnorm(m, v); }) / z;
    const double em2 = g.integrate([&](double m, double v) { return m * m * unnorm(m, v); }) / z;
    const double ev = g.integrate([&](double m, double v) { return v * unnorm(m, v); }) / z;
    const double ep = g.integrate([&](double m, double v) { return unnorm(m, v) / v; }) / z;
    const auto post = niw_posterior(prior, Eigen::MatrixXd::Constant(1, 1, x));
    const double s = post.scale_matrix(0, 0);
    err_post = std::max({std::abs(post.location(0) - em), std::abs(s / (post.dof - 2.0) - ev),
                         std::abs(s / (post.dof - 2.0) / post.kappa - (em2 - em * em)),
                         std::abs(post.dof / s - ep)});
  }
  {
    const auto prior = niw1(0.5, 2.0, 3.0, 1.5);
    for (double x : {0.7, -1.3, 3.0}) {
      Grid2 g;
      g.center = x;
      const double integral = g.integrate(
          [&](double m, double v) { return std::exp(niw1_logpdf(m, v, prior) + normal_logpdf(x, m, std::sqrt(v))); });
      err_marg = std::max(err_marg, std::abs(niw_marginal_logpdf(Vec::Constant(1, x), prior) - std::log(integral)));
    }
  }
  {
    Rng rng(derive_seed(2024, {3}));
    for (int rep = 0; rep < 20; ++rep) {
      MvnParams p;
      p.cov = random_spd(5, rng);
      p.mean = Vec(5);
      for (int i = 0; i < 5; ++i) p.mean(i) = rng.normal();
      const std::array<int, 2> idx{4, 1};
      Vec xo(2);
      xo << rng.normal(), rng.normal();
      const auto c = mvn_condition(p, idx, xo);
      MvnParams marg;
      marg.mean = Vec(2);
      marg.cov = Mat(2, 2);
      for (int a = 0; a < 2; ++a) {
        marg.mean(a) = p.mean(idx[a]);
        for (int b = 0; b < 2; ++b) marg.cov(a, b) = p.cov(idx[a], idx[b]);
      }
      Vec xf(3);
      xf << rng.normal(), rng.normal(), rng.normal();
      Vec full(5);
      full << xf(0), xo(1), xf(1), xf(2), xo(0);
      const double ratio = mvn_logpdf(full, p) - mvn_logpdf(xo, marg);
      err_cond = std::max(err_cond, std::abs(mvn_logpdf(xf, c) - ratio));
    }
  }
  detail_line("niw_posterior max moment error %.2e, niw_marginal_logpdf max error %.2e (limit 1e-3)", err_post,
              err_marg);
  detail_line("mvn_condition max log-density error %.2e (limit 1e-6)", err_cond);
  verdict("3", err_post < 1e-3 && err_marg < 1e-3 && err_cond < 1e-6, "conjugacy and conditioning oracles");
}

// ---------------------------------------------------------------------------

const CellResult* find_cell(const GridResult& g, const std::string& label, SecondStage m) {
  for (const auto& c : g.cells)
    if (c.label == label && c.model == m) return &c;
  return nullptr;
}

double mean_field(const CellResult& c, double ModelMetrics::*f) {
  double s = 0.0;
  int n = 0;
  for (const auto& m : c.metrics)
    if (std::isfinite(m.*f)) {
      s += m.*f;
      ++n;
    }
  return n ? s / n : std::nan("");
}

GridResult run_table_grid(const fs::path& out, int replicates, int jobs, double& seconds) {
  RunManifest mf;
  mf.dpm = simulation_dpm_config();
  mf.n_replicates = replicates;
  mf.jobs = jobs;
  mf.output_dir = out / "grid";
  for (const char* s : {"linear", "simple", "nonlinear", "null", "inter", "manybiom"}) {
    ScenarioConfig sc;
    sc.scenario = parse_scenario(s);
    mf.scenarios.push_back(sc);
  }
  fs::create_directories(mf.output_dir);
  write_json(mf.output_dir / "manifest.json", to_json(mf));
  // Wall time accumulates across resumed runs.
  const auto tfile = mf.output_dir / "wall_seconds.txt";
  double before = 0.0;
  if (fs::exists(tfile)) std::istringstream(slurp(tfile)) >> before;
  const auto t0 = std::chrono::steady_clock::now();
  GridResult g = run_grid(mf, GridProgress{log_line});
  seconds = before + seconds_since(t0);
  {
    std::ofstream os(tfile);
    os << seconds << '\n';
  }
  write_grid_tables(mf.output_dir, g);
  return g;
}

void criteria_tables(const GridResult& g, double seconds, int replicates) {
  for (const auto& f : g.failures) detail_line("job failure: %s", f.c_str());
  bool ok_a = true, ok_b = true, ok_c = true, ok_p = true, ok_order = true;
  std::vector<std::string> lines_a, lines_b, lines_c, lines_p, lines_o;
  for (const auto& [name, ref] : kPublished) {
    const std::string label = name + "-0.0-0.0";
    const auto* d = find_cell(g, label, SecondStage::dpm);
    const auto* s = find_cell(g, label, SecondStage::simple);
    if (!d || !s || d->metrics.empty() || s->metrics.empty()) {
      ok_a = ok_b = ok_c = ok_p = ok_order = false;
      lines_a.push_back(label + ": no completed replicates");
      continue;
    }
    char buf[256];
    const double dh = mean_field(*d, &ModelMetrics::median_dhat);
    const double sh = mean_field(*s, &ModelMetrics::median_dhat);
    const bool a = std::abs(dh - ref.dhat_dpm) <= 0.10;
    std::snprintf(buf, sizeof buf, "%-20s DPM D^ %.3f (published %.2f)%s; Simple D^ %.3f (published %.2f)",
                  label.c_str(), dh, ref.dhat_dpm, a ? "" : " *", sh, ref.dhat_simple);
    lines_a.push_back(buf);
    ok_a &= a;

    std::map<int, double> simple_by_rep;
    for (std::size_t i = 0; i < s->replicates.size(); ++i) simple_by_rep[s->replicates[i]] = s->metrics[i].median_dhat;
    int pairs = 0, wins = 0;
    for (std::size_t i = 0; i < d->replicates.size(); ++i) {
      const auto it = simple_by_rep.find(d->replicates[i]);
      if (it == simple_by_rep.end()) continue;
      ++pairs;
      wins += d->metrics[i].median_dhat < it->second ? 1 : 0;
    }
    const double share = pairs ? static_cast<double>(wins) / pairs : 0.0;
    std::snprintf(buf, sizeof buf, "%-20s DPM < Simple in %d / %d replicates (%.0f%%)", label.c_str(), wins, pairs,
                  100.0 * share);
    lines_b.push_back(buf);
    ok_b &= share >= 0.90;

    for (const auto* c : {d, s}) {
      const double md = mean_field(*c, &ModelMetrics::median_d);
      const double mh = mean_field(*c, &ModelMetrics::median_dhat);
      const bool cc = std::abs(mh - md) <= 0.05;
      std::snprintf(buf, sizeof buf, "%-20s %-6s mean D^ %.3f, mean D %.3f, gap %.3f%s", label.c_str(),
                    to_string(c->model), mh, md, std::abs(mh - md), cc ? "" : " *");
      lines_c.push_back(buf);
      ok_c &= cc;
    }

    const double pd = mean_field(*d, &ModelMetrics::p_superiority);
    const double ps = mean_field(*s, &ModelMetrics::p_superiority);
    const double pdi = mean_field(*d, &ModelMetrics::p_superiority_mean);
    const bool listed = name != "simple";
    const bool p = !listed || std::abs(pd - ref.p_dpm) <= 0.10;
    std::snprintf(buf, sizeof buf,
                  "%-20s DPM P %.3f (published %.2f)%s; Simple P %.3f (published %.2f); per-iteration DPM P %.3f",
                  label.c_str(), pd, ref.p_dpm, p ? "" : " *", ps, ref.p_simple, pdi);
    lines_p.push_back(buf);
    ok_p &= p;

    bool o = true;
    std::string rule = "-";
    if (name == "inter" || name == "manybiom" || name == "null") {
      o = pd > ps;
      rule = "DPM > Simple";
    } else if (name == "linear" || name == "simple") {
      o = ps >= pd;
      rule = "Simple >= DPM";
    }
    std::snprintf(buf, sizeof buf, "%-20s %s: %s", label.c_str(), rule.c_str(), o ? "holds" : "violated *");
    lines_o.push_back(buf);
    ok_order &= o;
  }
  auto dump = [](const std::vector<std::string>& v) {
    for (const auto& l : v) detail_line("%s", l.c_str());
  };
  dump(lines_a);
  verdict("4a", ok_a, "DPM mean-of-median D^ within 0.10 of the published cell values");
  dump(lines_b);
  verdict("4b", ok_b, "DPM < Simple in >= 90% of paired replicates, every cell");
  dump(lines_c);
  verdict("4c", ok_c, "|mean D^ - mean D| <= 0.05 in every cell");
  detail_line("grid wall time %.0f s for %d replicates on this machine, summed over resumed runs (budget 8 h)", seconds, replicates);
  verdict("4d", seconds <= 8 * 3600.0, "table grid within the runtime budget");
  dump(lines_p);
  verdict("5a", ok_p, "DPM P(D^ < D^0) within 0.10 of the published values");
  dump(lines_o);
  verdict("5b", ok_order, "Simple-model orderings of P(D^ < D^0)");
}

void criterion_recovery(const fs::path& out, const GridResult& table_grid, int replicates, int jobs) {
  RunManifest mf;
  mf.dpm = simulation_dpm_config();
  mf.n_replicates = replicates;
  mf.jobs = jobs;
  mf.models = {SecondStage::dpm};
  mf.output_dir = out / "recovery";
  for (const char* s : {"onetrt", "twotrt"}) {
    ScenarioConfig sc;
    sc.scenario = parse_scenario(s);
    mf.scenarios.push_back(sc);
  }
  fs::create_directories(mf.output_dir);
  write_json(mf.output_dir / "manifest.json", to_json(mf));
  GridResult g = run_grid(mf, GridProgress{log_line});
  write_grid_tables(mf.output_dir, g);
  for (const auto& f : g.failures) detail_line("job failure: %s", f.c_str());
  const std::vector<std::pair<std::string, double>> want = {{"onetrt", 0.76}, {"twotrt", 0.49}, {"manybiom", 0.90}};
  bool ok = true;
  for (const auto& [name, target] : want) {
    const std::string label = name + "-0.0-0.0";
    const auto* c = find_cell(g, label, SecondStage::dpm);
    if (!c) c = find_cell(table_grid, label, SecondStage::dpm);
    const double r = c ? mean_field(*c, &ModelMetrics::recovery) : std::nan("");
    const bool in = std::abs(r - target) <= 0.15;
    detail_line("%-10s recovery %.3f (published %.2f, n = %zu)%s", name.c_str(), r, target,
                c ? c->metrics.size() : 0, in ? "" : " *");
    ok &= in;
  }
  verdict("6", ok, "correct-cluster proportion within 0.15 of the published values");
}

// ---------------------------------------------------------------------------

double example_censored_fraction = std::nan("");

void criterion_example(const fs::path& out, int jobs) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExampleResult ex = run_example(20240501, simulation_dpm_config(), TrialConfig{}, jobs, 8, GridProgress{log_line});
  write_example(out / "example", ex);
  example_censored_fraction = ex.censored_fraction;
  detail_line("example wall time %.0f s", seconds_since(t0));
  detail_line("group 9 high-value cluster rate %.3f (published 0.972)", ex.correct_rate);
  verdict("7a", std::abs(ex.correct_rate - 0.972) <= 0.10, "example cluster assignment rate within 0.10");
  detail_line("median D^ %.3f (published 2.02), median D^0 %.3f", ex.report.dhat_pooled.median,
              ex.report.dhat0_pooled ? ex.report.dhat0_pooled->median : std::nan(""));
  verdict("7b", std::abs(ex.report.dhat_pooled.median - 2.02) <= 0.3, "example median D^ within 0.3");
  const auto& pc = ex.report.per_cluster;
  const bool have = ex.good_cluster >= 0 && ex.bad_cluster >= 0 && ex.good_cluster != ex.bad_cluster &&
                    ex.good_cluster < static_cast<int>(pc.size()) && ex.bad_cluster < static_cast<int>(pc.size());
  const double pg = have ? pc[ex.good_cluster].p_superiority : std::nan("");
  const double pb = have ? pc[ex.bad_cluster].p_superiority : std::nan("");
  detail_line("P(D^ < D^0): good cluster %.3f, poor cluster %.3f, overall %.3f", pg, pb,
              ex.report.p_superiority.value_or(std::nan("")));
  verdict("7c", have && pg > pb, "per-cluster superiority higher in the good cluster");
}

void criterion_calibration() {
  // Mixed scenarios, seeds derived from a fixed root.
  std::array<double, 5> mean{};
  const int reps = 100;
  for (int r = 0; r < reps; ++r) {
    ScenarioConfig sc;
    sc.scenario = kAllScenarios[r % kAllScenarios.size()];
    sc.seed = dataset_seed(20240501, "calibration", r);
    const Dataset ds = simulate_dataset(sc, TrialConfig{});
    const auto n = group_sizes(ds.data.subjects, sc.n_treatments, sc.n_biomarkers);
    std::vector<double> v(n.begin(), n.end());
    std::sort(v.begin(), v.end());
    const std::array<double, 5> q = {v.front(), sorted_quantile(v, 0.25), sorted_quantile(v, 0.5),
                                     sorted_quantile(v, 0.75), v.back()};
    for (int i = 0; i < 5; ++i) mean[i] += q[i] / reps;
  }
  const std::array<double, 5> want = {6, 10, 13, 20, 115};
  bool ok = true;
  for (int i = 0; i < 5; ++i) ok &= std::abs(mean[i] - want[i]) <= 0.30 * want[i];
  detail_line("five-number summary (%.1f, %.1f, %.1f, %.1f, %.1f) vs (6, 10, 13, 20, 115)", mean[0], mean[1], mean[2],
              mean[3], mean[4]);
  verdict("8a", ok, "group sizes within 30% of the published summary");
  const double cf = example_censored_fraction;
  detail_line("censored fraction %.3f", cf);
  verdict("8b", std::abs(cf - 0.10) <= 0.04, "censored fraction 10% +/- 4% in the censoring example");
}

void criterion_properties() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string cmd = std::string(DPSURR_TESTS_PATH) + " --gtest_brief=1 > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  const double sec = seconds_since(t0);
  const bool passed = WIFEXITED(rc) && WEXITSTATUS(rc) == 0;
  detail_line("unit and property suite %s in %.1f s (limit 300)", passed ? "passed" : "failed", sec);
  verdict("9", passed && sec < 300.0, "property suites pass standalone in under 5 minutes");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string out = "acceptance";
  int replicates = 20, jobs = 1;
  std::vector<std::string> only;
  app.add_option("--out", out, "Working directory (grids resume from here)");
  app.add_option("--replicates", replicates, "Replicates per grid cell")->capture_default_str();
  app.add_option("--jobs", jobs, "Worker threads")->capture_default_str();
  app.add_option("--only", only, "Criteria to run (1-9)");
  CLI11_PARSE(app, argc, argv);
  const fs::path dir = out;
  fs::create_directories(dir);
  const std::set<std::string> sel(only.begin(), only.end());
  auto want = [&](const char* c) { return sel.empty() || sel.count(c) > 0; };

  try {
    if (want("1")) criterion_gold();
    if (want("2")) criterion_crp();
    if (want("3")) criterion_conjugacy();
    if (want("4") || want("5") || want("6")) {
      double sec = 0.0;
      const GridResult g = run_table_grid(dir, replicates, jobs, sec);
      if (want("4") || want("5")) criteria_tables(g, sec, replicates);
      if (want("6")) criterion_recovery(dir, g, replicates, jobs);
    }
    if (want("7") || want("8")) criterion_example(dir, jobs);
    if (want("8")) criterion_calibration();
    if (want("9")) criterion_properties();
  } catch (const std::exception& e) {
    verdict("run", false, std::string("aborted: ") + e.what());
  }
  std::printf("%d criteria failed\n", n_fail);
  return n_fail == 0 ? 0 : 1;
}
