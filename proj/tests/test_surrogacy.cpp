#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "test_util.hpp"

using namespace dpsurr;
using namespace dpsurr::testing;

namespace {

LooResult fold(int j, std::vector<double> loo, std::vector<double> full, int n_groups = 2) {
  LooResult r;
  r.group = j;
  r.n_groups = n_groups;
  r.loo_mu = std::move(loo);
  r.full_mu = std::move(full);
  for (std::size_t t = 0; t < r.loo_mu.size(); ++t) r.dhat.push_back(std::abs(r.loo_mu[t] - r.full_mu[t]));
  r.assigned_cluster.assign(r.loo_mu.size(), 0);
  r.labels.assign(r.loo_mu.size() * n_groups, 0);
  return r;
}

// Sum of squared deviations between a partition's association matrix and
// the co-clustering frequencies, computed directly.
double dahl_score(const std::vector<int>& part, const std::vector<std::vector<int>>& draws) {
  const std::size_t n = part.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      double p = 0.0;
      for (const auto& d : draws) p += d[i] == d[k];
      p /= draws.size();
      const double a = part[i] == part[k];
      s += (a - p) * (a - p);
    }
  return s;
}

std::vector<std::vector<int>> random_label_draws(int t, int n, int k, Rng& rng) {
  std::vector<std::vector<int>> out(t, std::vector<int>(n));
  for (auto& d : out)
    for (auto& l : d) l = static_cast<int>(rng() % k);
  return out;
}

AnalysisData linear_analysis(std::uint64_t seed) {
  ScenarioConfig sc;
  sc.scenario = Scenario::linear;
  sc.seed = seed;
  return simulate_dataset(sc, TrialConfig{}).data;
}

}  // namespace

// ---------------------------------------------------------------------------
// D^

TEST(Dhat, ZeroWhenPredictionsMatch) {
  const std::vector<LooResult> f = {fold(0, {1, 2, 3}, {1, 2, 3}), fold(1, {0, 0, 0}, {0, 0, 0})};
  for (double v : compute_dhat(f)) EXPECT_EQ(v, 0.0);
}

TEST(Dhat, MeanOverGroups) {
  const std::vector<LooResult> f = {fold(0, {0.5, 0.5}, {0.0, 0.0}), fold(1, {0.0, 0.0}, {1.5, 1.5})};
  for (double v : compute_dhat(f)) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_EQ(pooled_dhat(f).size(), 4u);
}

TEST(Dhat, MismatchedDrawCounts) {
  const std::vector<LooResult> f = {fold(0, {0.5, 0.5}, {0.0, 0.0}), fold(1, {0.0}, {1.5})};
  EXPECT_THROW(compute_dhat(f), DataError);
}

// ---------------------------------------------------------------------------
// prob_superiority

TEST(ProbSuperiority, TieRule) {
  const std::vector<double> x = {0.3, 0.1, 0.7, 0.7};
  EXPECT_EQ(prob_superiority(x, x), 0.5);
  EXPECT_EQ(prob_superiority(std::vector<double>(5, 0.0), std::vector<double>(5, 1.0)), 1.0);
  EXPECT_THROW(prob_superiority(std::vector<double>{}, x), DomainError);
}

TEST(ProbSuperiority, ComplementForTieFreeInputs) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(200), b(200);
    for (double& v : a) v = rng.normal();
    for (double& v : b) v = rng.normal() + 0.3;
    EXPECT_DOUBLE_EQ(prob_superiority(a, b) + prob_superiority(b, a), 1.0);
  }
}

// ---------------------------------------------------------------------------
// Dahl estimate

TEST(Dahl, SinglePartition) {
  const std::vector<std::vector<int>> d(10, {2, 2, 0, 1});
  EXPECT_EQ(dahl_cluster_estimate(d), (std::vector<int>{0, 0, 1, 2}));
}

TEST(Dahl, AlwaysTogetherStaysTogether) {
  Rng rng(2);
  auto d = random_label_draws(50, 6, 3, rng);
  for (auto& x : d) x[1] = x[0];
  const auto est = dahl_cluster_estimate(d);
  EXPECT_EQ(est[0], est[1]);
}

TEST(Dahl, ExhaustiveScoringOracle) {
  std::vector<std::vector<int>> d;
  for (int i = 0; i < 60; ++i) d.push_back({1, 1, 2});
  for (int i = 0; i < 40; ++i) d.push_back({1, 2, 2});
  const std::vector<int> a = {1, 1, 2}, b = {1, 2, 2};
  ASSERT_LT(dahl_score(a, d), dahl_score(b, d));
  EXPECT_EQ(dahl_cluster_estimate(d), canonical_labels(a));
}

TEST(Dahl, EstimateIsASampledPartitionWithMinimalScore) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto d = random_label_draws(40, 7, 3, rng);
    const auto est = dahl_cluster_estimate(d);
    bool found = false;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& x : d) {
      found |= canonical_labels(x) == est;
      best = std::min(best, dahl_score(x, d));
    }
    EXPECT_TRUE(found);
    EXPECT_NEAR(dahl_score(est, d), best, 1e-9);
  }
}

TEST(Dahl, LabelSwitchingImmunity) {
  Rng rng(4);
  const auto d = random_label_draws(60, 8, 4, rng);
  auto relabeled = d;
  std::mt19937 perm(5);
  for (auto& x : relabeled) {
    std::vector<int> map = {0, 1, 2, 3};
    std::shuffle(map.begin(), map.end(), perm);
    for (int& l : x) l = map[l] + 10;
  }
  EXPECT_EQ(dahl_cluster_estimate(d), dahl_cluster_estimate(relabeled));
  for (std::size_t t = 0; t < d.size(); ++t) EXPECT_EQ(canonical_labels(d[t]), canonical_labels(relabeled[t]));
}

// ---------------------------------------------------------------------------
// Cluster recovery

TEST(ClusterRecovery, HandCountedAgreement) {
  // three groups, truth {A, A, B}; fold for group 0 with one draw where all
  // share a cluster: agreement with group 1 yes, with group 2 no -> 1/2
  LooResult f = fold(0, {0.0}, {0.0}, 3);
  f.labels = {0, 0, 0};
  const std::vector<int> truth = {1, 1, 2};
  EXPECT_DOUBLE_EQ(cluster_recovery({f}, truth), 0.5);
  f.labels = {0, 0, 1};
  EXPECT_DOUBLE_EQ(cluster_recovery({f}, truth), 1.0);
  // relabeling the draw changes nothing
  f.labels = {5, 5, 2};
  EXPECT_DOUBLE_EQ(cluster_recovery({f}, truth), 1.0);
}

// ---------------------------------------------------------------------------
// Summaries

TEST(Summaries, Type7Quantiles) {
  const std::vector<double> v = {1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(sorted_quantile(v, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(sorted_quantile(v, 0.25), 1.75);
  EXPECT_DOUBLE_EQ(sorted_quantile(v, 1.0), 4.0);
}

TEST(Summaries, SingleClusterEqualsOverall) {
  ModelFit fit;
  Rng rng(6);
  for (int j = 0; j < 4; ++j) {
    std::vector<double> a(30), b(30);
    for (int t = 0; t < 30; ++t) {
      a[t] = rng.normal();
      b[t] = rng.normal();
    }
    fit.folds.push_back(fold(j, a, b, 4));
  }
  AnalysisData data;
  data.n_treatments = 2;
  data.n_biomarkers = 2;
  data.z = Eigen::MatrixXd::Zero(4, 1);
  const auto r = subgroup_summaries(fit, {0, 0, 0, 0}, group_meta(data));
  ASSERT_EQ(r.per_cluster.size(), 1u);
  EXPECT_EQ(r.per_cluster[0].dhat.median, r.dhat_pooled.median);
  EXPECT_EQ(r.per_cluster[0].dhat.mean, r.dhat_pooled.mean);
  EXPECT_FALSE(r.per_cluster[0].flagged);
  ASSERT_EQ(r.per_group.size(), 4u);
  for (const auto& g : r.per_group) EXPECT_NEAR(g.interval_upper - g.loo_median, r.dhat_pooled.median, 1e-12);
  // per-stratum group sets partition the groups
  std::vector<int> seen;
  for (const auto& s : r.per_treatment) seen.insert(seen.end(), s.groups.begin(), s.groups.end());
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, (std::vector<int>{0, 1, 2, 3}));
}

TEST(Summaries, FlagsDivergentCluster) {
  ModelFit fit;
  for (int j = 0; j < 4; ++j) {
    const double e = j < 2 ? 0.1 : 1.0;
    fit.folds.push_back(fold(j, std::vector<double>(10, e), std::vector<double>(10, 0.0), 4));
  }
  AnalysisData data;
  data.n_treatments = 2;
  data.n_biomarkers = 2;
  data.z = Eigen::MatrixXd::Zero(4, 1);
  const auto r = subgroup_summaries(fit, {0, 0, 1, 1}, group_meta(data));
  EXPECT_TRUE(r.per_cluster[0].flagged);
  EXPECT_TRUE(r.per_cluster[1].flagged);
}

TEST(Summaries, DensityIntegratesToOne) {
  Rng rng(7);
  std::vector<double> x(2000);
  for (double& v : x) v = std::abs(rng.normal());
  std::vector<double> grid;
  for (int i = 0; i <= 1000; ++i) grid.push_back(-2.0 + 8.0 * i / 1000);
  const auto d = density_on_grid(x, grid);
  double total = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i) total += 0.5 * (d[i] + d[i - 1]) * (grid[i] - grid[i - 1]);
  EXPECT_NEAR(total, 1.0, 1e-3);
}

// ---------------------------------------------------------------------------
// Leave-one-out

TEST(Loo, InvalidGroups) {
  const auto data = linear_analysis(1);
  Rng rng(8);
  PosteriorDraws ref;
  EXPECT_THROW(loo_predict(data, short_config(), -1, ref, rng), DataError);
  EXPECT_THROW(loo_predict(data, short_config(), 64, ref, rng), DataError);
  auto masked = data;
  masked.masked = {3};
  EXPECT_THROW(loo_predict(masked, short_config(), 3, ref, rng), DataError);
}

TEST(Loo, StratumWithoutOutcomesIsRejected) {
  auto data = linear_analysis(2);
  data.masked = {0, 1, 2};  // biomarker 1 keeps only treatment 4
  Rng rng(9);
  PosteriorDraws ref;
  try {
    loo_predict(data, short_config(), 3, ref, rng);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("biomarker 1"), std::string::npos) << e.what();
  }
}

TEST(Loo, FoldShapeAndPairing) {
  const auto data = linear_analysis(3);
  const auto cfg = short_config(40, 10, 2);
  const auto fit = evaluate_model(data, cfg, 77);
  ASSERT_EQ(fit.folds.size(), 64u);
  for (const auto& f : fit.folds) {
    ASSERT_EQ(f.size(), 15);
    ASSERT_EQ(f.loo_mu.size(), f.full_mu.size());
    ASSERT_EQ(f.assigned_cluster.size(), f.dhat.size());
    for (int t = 0; t < f.size(); ++t) {
      EXPECT_GE(f.dhat[t], 0.0);
      EXPECT_EQ(f.full_mu[t], fit.reference.draws[t].mu(f.group));
      EXPECT_EQ(f.assigned_cluster[t], f.label(t, f.group));
    }
  }
}

TEST(Loo, PlugInUsesPosteriorMean) {
  const auto data = linear_analysis(4);
  const auto cfg = short_config(30, 10, 2);
  Rng rr(1);
  const auto ref = run_chain(make_stage1_data(data.subjects, 4, 16), data.z, cfg, rr);
  Rng rng(2);
  const auto r = loo_predict(data, cfg, 5, ref, rng, true);
  const auto mu = ref.mu_draws(5);
  for (double v : r.full_mu) EXPECT_NEAR(v, mean_of(mu), 1e-12);
}

TEST(Loo, IndependentOfJobCount) {
  const auto data = linear_analysis(5);
  const auto cfg = short_config(20, 10, 2);
  const auto a = evaluate_model(data, cfg, 99, 1);
  const auto b = evaluate_model(data, cfg, 99, 3);
  ASSERT_EQ(a.folds.size(), b.folds.size());
  for (std::size_t i = 0; i < a.folds.size(); ++i) {
    EXPECT_EQ(a.folds[i].loo_mu, b.folds[i].loo_mu);
    EXPECT_EQ(a.folds[i].labels, b.folds[i].labels);
  }
}

TEST(Loo, LinearScenarioPredictionsTrackTruth) {
  ScenarioConfig sc;
  sc.scenario = Scenario::linear;
  sc.seed = 6;
  const auto ds = simulate_dataset(sc, TrialConfig{});
  const auto fit = evaluate_model(ds.data, short_config(300, 100, 2), 7);
  std::vector<double> pred, truth;
  for (const auto& f : fit.folds) {
    pred.push_back(quantile(f.loo_mu, 0.5));
    truth.push_back(ds.truth[f.group].mu);
  }
  const double mp = mean_of(pred), mt = mean_of(truth);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sab += (pred[i] - mp) * (truth[i] - mt);
    saa += (pred[i] - mp) * (pred[i] - mp);
    sbb += (truth[i] - mt) * (truth[i] - mt);
  }
  EXPECT_GT(sab / std::sqrt(saa * sbb), 0.7);
}

TEST(Loo, NullModelErrorsNonNegative) {
  const auto data = linear_analysis(8);
  for (double v : compute_null_dhat(data, short_config(20, 10, 2), 5)) EXPECT_GE(v, 0.0);
}

TEST(Loo, NullModelIgnoresSurrogate) {
  // Permuting S across subjects leaves every null-model draw unchanged.
  auto data = linear_analysis(9);
  auto shuffled = data;
  std::vector<double> s;
  for (const auto& r : shuffled.subjects) s.push_back(r.s);
  std::mt19937 perm(1);
  std::shuffle(s.begin(), s.end(), perm);
  for (std::size_t i = 0; i < s.size(); ++i) shuffled.subjects[i].s = s[i];
  DpmConfig cfg = short_config(20, 10, 2);
  cfg.second_stage = SecondStage::null;
  const auto a = evaluate_model(data, cfg, 3), b = evaluate_model(shuffled, cfg, 3);
  for (std::size_t i = 0; i < a.folds.size(); ++i) EXPECT_EQ(a.folds[i].dhat, b.folds[i].dhat);
}
