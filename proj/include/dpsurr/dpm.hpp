#pragma once

// Second stage: a Dirichlet-process mixture of multivariate normals over the
// group rows (nu_j, mu_j, Z_j), sampled with Neal's auxiliary-component
// scheme (Algorithm 8) and a conjugate NIW refresh of the cluster
// parameters, interleaved with the stage-1 sweep. Two comparators share the
// driver: a single multivariate normal with means linear in Z ("simple") and
// a DPM over (mu_j, Z_j) that never looks at the surrogate ("null").
//
// Cluster labels are 0-based and compact (0..k-1) in memory; files and
// reports use 1-based labels.

#include <Eigen/Dense>
#include <unsupported/Eigen/KroneckerProduct>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "distributions.hpp"
#include "errors.hpp"
#include "random.hpp"
#include "stage1.hpp"
#include "trialgen.hpp"

namespace dpsurr {

enum class SecondStage { dpm, simple, null };

inline const char* to_string(SecondStage s) {
  switch (s) {
    case SecondStage::dpm: return "dpm";
    case SecondStage::simple: return "simple";
    case SecondStage::null: return "null";
  }
  return "?";
}

inline SecondStage parse_second_stage(const std::string& s) {
  if (s == "dpm") return SecondStage::dpm;
  if (s == "simple") return SecondStage::simple;
  if (s == "null") return SecondStage::null;
  throw DomainError("unknown model '" + s + "' (expected dpm, simple or null)");
}

// Number of effect columns that precede Z in a second-stage row.
inline int n_effect_columns(SecondStage s) { return s == SecondStage::null ? 1 : 2; }

struct ClusterState {
  std::vector<int> labels;
  std::vector<ClusterParams> omegas;
  double alpha = 1.0;

  int k() const { return static_cast<int>(omegas.size()); }

  bool is_compact() const {
    std::vector<char> seen(omegas.size(), 0);
    for (int c : labels) {
      if (c < 0 || c >= k()) return false;
      seen[c] = 1;
    }
    return std::all_of(seen.begin(), seen.end(), [](char s) { return s != 0; });
  }

  std::vector<int> counts() const {
    std::vector<int> n(omegas.size(), 0);
    for (int c : labels) n[c]++;
    return n;
  }
};

struct ChainConfig {
  int n_iter = 4000;
  int burn_in = 2000;
  int thin = 2;
  int k_init = 8;  // capped at the number of groups

  int n_retained() const { return (n_iter - burn_in) / thin; }

  void validate() const {
    if (n_iter <= 0 || burn_in < 0 || n_iter <= burn_in) throw DomainError("chain: need n_iter > burn_in >= 0");
    if (thin < 1) throw DomainError("chain: thin must be >= 1");
    if (k_init < 1) throw DomainError("chain: k_init must be >= 1");
  }
};

struct DpmConfig {
  std::optional<NiwParams> base_measure;  // empty: built from the data
  GammaParams alpha_prior{2.0, 4.0};
  int n_aux = 1;
  SecondStage second_stage = SecondStage::dpm;
  ChainConfig chain;
  bool paper_literal_alpha = false;
  bool scale_matrix_inverted = false;
  // Stage-1 priors.
  double tau = 1e4;
  double nuisance_cov = 0.0;
  GammaParams precision_prior{1.0, 1.0};
  // Simple comparator: vec(B) ~ N(0, simple_coef_var I).
  double simple_coef_var = 100.0;

  void validate() const {
    chain.validate();
    if (n_aux < 1) throw DomainError("dpm: n_aux must be >= 1");
    dpsurr::validate(alpha_prior);
    dpsurr::validate(precision_prior);
    if (!(tau > 0.0)) throw DomainError("dpm: tau must be positive");
    if (!(tau * tau - nuisance_cov * nuisance_cov > 0.0)) throw DomainError("dpm: nuisance prior not PD");
    if (!(simple_coef_var > 0.0)) throw DomainError("dpm: simple_coef_var must be positive");
    if (base_measure) dpsurr::validate(*base_measure);
  }
};

// ---------------------------------------------------------------------------
// Base measure and initialization

/// Data-driven G0. `rows` are the initial second-stage rows (one per group),
/// `weights` the group sample sizes. Location: weighted mean; scale matrix:
/// diag of the inverse weighted variances (or the variances themselves when
/// `inverted`); dof = d + 2 with d the number of Z columns; kappa = 1/n_groups.
inline NiwParams build_base_measure(const Eigen::MatrixXd& rows, std::span<const double> weights, int d,
                                    bool inverted = false) {
  const int n = static_cast<int>(rows.rows());
  const int p = static_cast<int>(rows.cols());
  if (n < 2) throw DomainError("build_base_measure: need at least two groups");
  if (static_cast<int>(weights.size()) != n) throw DomainError("build_base_measure: one weight per group");
  if (p > kMaxDim) throw DomainError("build_base_measure: too many columns");
  double wsum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw DomainError("build_base_measure: negative weight");
    wsum += w;
  }
  if (!(wsum > 0.0)) throw DomainError("build_base_measure: zero total weight");
  NiwParams g;
  g.location = Vec::Zero(p);
  for (int i = 0; i < n; ++i) g.location += weights[i] * rows.row(i).transpose();
  g.location /= wsum;
  g.scale_matrix = Mat::Zero(p, p);
  for (int c = 0; c < p; ++c) {
    double v = 0.0;
    for (int i = 0; i < n; ++i) {
      const double r = rows(i, c) - g.location(c);
      v += weights[i] * r * r;
    }
    v /= wsum;
    v = std::max(v, 1e-8);
    g.scale_matrix(c, c) = inverted ? v : 1.0 / v;
  }
  g.dof = d + 2.0;
  g.kappa = 1.0 / n;
  return g;
}

/// Lloyd's k-means with k-means++ seeding on column-standardized rows.
/// Empty clusters are dropped, so fewer than k labels may come back.
inline std::vector<int> kmeans_labels(const Eigen::MatrixXd& rows, int k, Rng& rng, int max_iter = 100) {
  const int n = static_cast<int>(rows.rows());
  if (k < 1 || k > n) throw DomainError("kmeans: k must lie in 1..n_groups");
  Eigen::MatrixXd x = rows;
  for (int c = 0; c < x.cols(); ++c) {
    const double mean = x.col(c).mean();
    const double sd = std::sqrt((x.col(c).array() - mean).square().mean());
    x.col(c) = (x.col(c).array() - mean) / (sd > 0.0 ? sd : 1.0);
  }
  std::vector<int> labels(n, 0);
  if (k == 1) return labels;

  Eigen::MatrixXd centers(k, x.cols());
  centers.row(0) = x.row(std::uniform_int_distribution<int>(0, n - 1)(rng));
  std::vector<double> d2(n);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int e = 0; e < c; ++e) best = std::min(best, (x.row(i) - centers.row(e)).squaredNorm());
      d2[i] = best;
      total += best;
    }
    int pick = 0;
    if (total > 0.0) {
      double u = uniform01(rng) * total;
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2[pick];
        if (u < 0.0) break;
      }
    } else {
      pick = std::uniform_int_distribution<int>(0, n - 1)(rng);
    }
    centers.row(c) = x.row(pick);
  }
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best_c = 0;
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double dist = (x.row(i) - centers.row(c)).squaredNorm();
        if (dist < best) {
          best = dist;
          best_c = c;
        }
      }
      if (labels[i] != best_c) changed = true;
      labels[i] = best_c;
    }
    std::vector<int> cnt(k, 0);
    centers.setZero();
    for (int i = 0; i < n; ++i) {
      centers.row(labels[i]) += x.row(i);
      cnt[labels[i]]++;
    }
    for (int c = 0; c < k; ++c)
      if (cnt[c] > 0) centers.row(c) /= cnt[c];
    if (!changed && it > 0) break;
  }
  // compact in order of first appearance
  std::vector<int> map(k, -1);
  int next = 0;
  for (int& l : labels) {
    if (map[l] < 0) map[l] = next++;
    l = map[l];
  }
  return labels;
}

inline ClusterState init_clusters(const Eigen::MatrixXd& rows, const NiwParams& base, int k_init,
                                  const GammaParams& alpha_prior, Rng& rng) {
  if (k_init < 1 || k_init > rows.rows()) throw DomainError("init_clusters: k_init out of range");
  ClusterState st;
  st.labels = kmeans_labels(rows, k_init, rng);
  const int k = *std::max_element(st.labels.begin(), st.labels.end()) + 1;
  const NiwSampler g0(base);
  for (int c = 0; c < k; ++c) st.omegas.push_back(g0.draw(rng));
  st.alpha = gamma_sample(alpha_prior, rng);
  return st;
}

// ---------------------------------------------------------------------------
// Step 1: assignments

// Likelihood seams for update_assignments. Tests swap in the constant one
// to reduce the scan to a Chinese restaurant process.
struct GaussianLikelihood {
  double operator()(const GaussianKernel& k, const Vec& x) const { return k.logpdf(x); }
};
struct ConstantLikelihood {
  double operator()(const GaussianKernel&, const Vec&) const { return 0.0; }
};

/// Normalized probabilities of joining each existing cluster (counts exclude
/// the group being moved) followed by each auxiliary component.
template <class Likelihood = GaussianLikelihood>
std::vector<double> assignment_probabilities(std::span<const int> counts, std::span<const GaussianKernel> kernels,
                                             std::span<const GaussianKernel> aux, double alpha, const Vec& x,
                                             Likelihood lik = {}) {
  std::vector<double> w;
  w.reserve(counts.size() + aux.size());
  for (size_t c = 0; c < counts.size(); ++c)
    w.push_back(counts[c] > 0 ? std::log(static_cast<double>(counts[c])) + lik(kernels[c], x)
                              : -std::numeric_limits<double>::infinity());
  const double la = std::log(alpha / static_cast<double>(aux.size()));
  for (const auto& a : aux) w.push_back(la + lik(a, x));
  const double mx = *std::max_element(w.begin(), w.end());
  double total = 0.0;
  for (double& v : w) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : w) v /= total;
  return w;
}

/// One Algorithm-8 scan over all groups. The returned state is compact.
template <class Likelihood = GaussianLikelihood>
ClusterState update_assignments(ClusterState st, const Eigen::MatrixXd& effects, const NiwSampler& base, int n_aux,
                                Rng& rng, Likelihood lik = {}) {
  if (n_aux < 1) throw DomainError("update_assignments: n_aux must be >= 1");
  if (!st.is_compact()) throw DomainError("update_assignments: labels are not compact");
  const int n = static_cast<int>(effects.rows());
  std::vector<GaussianKernel> kernels;
  kernels.reserve(st.omegas.size() + 1);
  for (const auto& o : st.omegas) kernels.push_back(GaussianKernel::from_covariance(o.phi, o.sigma));
  std::vector<int> counts = st.counts();
  std::vector<GaussianKernel> aux(n_aux);
  std::vector<double> logw;
  Vec x;

  for (int i = 0; i < n; ++i) {
    x = effects.row(i).transpose();
    const int ci = st.labels[i];
    counts[ci]--;
    std::optional<ClusterParams> kept;
    int first_fresh = 0;
    if (counts[ci] == 0) {
      // singleton: its parameters become the first auxiliary component
      aux[0] = kernels[ci];
      kept = std::move(st.omegas[ci]);
      first_fresh = 1;
      const int last = st.k() - 1;
      if (ci != last) {
        st.omegas[ci] = std::move(st.omegas[last]);
        kernels[ci] = std::move(kernels[last]);
        counts[ci] = counts[last];
        for (int& l : st.labels)
          if (l == last) l = ci;
      }
      st.omegas.pop_back();
      kernels.pop_back();
      counts.pop_back();
    }
    st.labels[i] = -1;
    for (int h = first_fresh; h < n_aux; ++h) aux[h] = base.draw_kernel(rng);

    const int k = st.k();
    logw.resize(k + n_aux);
    for (int c = 0; c < k; ++c) logw[c] = std::log(static_cast<double>(counts[c])) + lik(kernels[c], x);
    const double la = std::log(st.alpha / n_aux);
    for (int h = 0; h < n_aux; ++h) logw[k + h] = la + lik(aux[h], x);
    const double mx = *std::max_element(logw.begin(), logw.end());
    double total = 0.0;
    for (double& v : logw) {
      v = std::exp(v - mx);
      total += v;
    }
    double u = uniform01(rng) * total;
    int pick = k + n_aux - 1;
    for (int c = 0; c < k + n_aux; ++c) {
      u -= logw[c];
      if (u < 0.0) {
        pick = c;
        break;
      }
    }
    if (pick < k) {
      st.labels[i] = pick;
      counts[pick]++;
    } else {
      const int h = pick - k;
      kernels.push_back(aux[h]);
      st.omegas.push_back(h == 0 && kept ? std::move(*kept) : NiwSampler::to_params(aux[h]));
      counts.push_back(1);
      st.labels[i] = k;
    }
  }
  return st;
}

template <class Likelihood = GaussianLikelihood>
ClusterState update_assignments(ClusterState st, const Eigen::MatrixXd& effects, const NiwParams& base, int n_aux,
                                Rng& rng, Likelihood lik = {}) {
  return update_assignments(std::move(st), effects, NiwSampler(base), n_aux, rng, lik);
}

// ---------------------------------------------------------------------------
// Step 2: cluster parameters

inline ClusterState update_cluster_params(ClusterState st, const Eigen::MatrixXd& effects, const NiwParams& base,
                                          Rng& rng) {
  if (!st.is_compact()) throw DomainError("update_cluster_params: labels are not compact");
  const int p = static_cast<int>(effects.cols());
  std::vector<SuffStats> ss(st.k(), SuffStats(p));
  Vec x;
  for (int i = 0; i < effects.rows(); ++i) {
    x = effects.row(i).transpose();
    ss[st.labels[i]].add(x);
  }
  for (int c = 0; c < st.k(); ++c) st.omegas[c] = niw_sample(niw_posterior(base, ss[c]), rng);
  return st;
}

// ---------------------------------------------------------------------------
// Step 3: concentration

/// Mixture weight pi of the Gamma(a + k, .) component given the auxiliary z.
inline double alpha_mixture_weight(int k, int n, const GammaParams& prior, double z, bool paper_literal = false) {
  const double odds_num = prior.shape + k + (paper_literal ? 1.0 : -1.0);
  const double odds_den = n * (prior.rate - std::log(z));
  return odds_num / (odds_num + odds_den);
}

inline double update_alpha(int k, int n, const GammaParams& prior, double alpha_old, Rng& rng,
                           bool paper_literal = false) {
  if (k < 1 || n < k) throw DomainError("update_alpha: need 1 <= k <= n");
  const double z = beta_sample(alpha_old + 1.0, n, rng);
  const double rate = prior.rate - std::log(z);
  const double pi = alpha_mixture_weight(k, n, prior, z, paper_literal);
  const double shape = uniform01(rng) < pi ? prior.shape + k : prior.shape + k - 1.0;
  return gamma_sample(shape, rate, rng);
}

// ---------------------------------------------------------------------------
// Step 4: conditional priors of the effects given Z

/// For each group, the law of its leading `n_effects` coordinates given its
/// Z block under its cluster's normal. Clusters are conditioned once; only
/// the mean shifts per member.
inline std::vector<MvnParams> conditional_effect_priors(const ClusterState& st, const Eigen::MatrixXd& z,
                                                        int n_effects) {
  const int n = static_cast<int>(st.labels.size());
  if (z.rows() != n) throw DomainError("conditional_effect_priors: one Z row per group");
  const int d = static_cast<int>(z.cols());
  struct Cond {
    Vec mean_f, mean_o;
    Mat gain;  // n_effects x d
    Mat cov;
  };
  std::vector<Cond> conds(st.k());
  for (int c = 0; c < st.k(); ++c) {
    const auto& o = st.omegas[c];
    const int p = static_cast<int>(o.phi.size());
    if (p != n_effects + d) throw DomainError("conditional_effect_priors: cluster dimension mismatch");
    Cond& cd = conds[c];
    cd.mean_f = o.phi.head(n_effects);
    cd.mean_o = o.phi.tail(d);
    if (d == 0) {
      cd.gain = Mat::Zero(n_effects, 0);
      cd.cov = o.sigma;
      continue;
    }
    const Mat s_oo = o.sigma.bottomRightCorner(d, d);
    const Mat s_fo = o.sigma.topRightCorner(n_effects, d);
    const auto llt = detail::checked_llt(detail::symmetrized(s_oo), "conditional_effect_priors: Z block");
    const Mat gain_t = llt.solve(s_fo.transpose());  // d x n_effects
    cd.gain = gain_t.transpose();
    cd.cov = detail::symmetrized(o.sigma.topLeftCorner(n_effects, n_effects) - s_fo * gain_t);
  }
  std::vector<MvnParams> out(n);
  for (int j = 0; j < n; ++j) {
    const Cond& cd = conds[st.labels[j]];
    out[j].mean = cd.mean_f;
    if (d > 0) out[j].mean += cd.gain * (z.row(j).transpose() - cd.mean_o);
    out[j].cov = cd.cov;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simple comparator: (nu_j, mu_j) = B^T [1, Z_j] + e_j, e_j ~ N(0, Omega).

struct SimpleRegressionPrior {
  double coef_var = 100.0;
  double dof = 3.0;
  Mat scale;  // 2 x 2
};

struct SimpleRegressionState {
  Eigen::MatrixXd coef;  // (1 + d) x 2
  Mat omega;             // 2 x 2
};

inline Eigen::MatrixXd simple_design(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd x(z.rows(), z.cols() + 1);
  x.col(0).setOnes();
  x.rightCols(z.cols()) = z;
  return x;
}

/// One Gibbs pass: vec(B) | Omega (Gaussian), then Omega | B (inverse Wishart).
inline SimpleRegressionState update_simple_regression(SimpleRegressionState st, const Eigen::MatrixXd& effects,
                                                      const Eigen::MatrixXd& design,
                                                      const SimpleRegressionPrior& prior, Rng& rng) {
  const int n = static_cast<int>(effects.rows());
  const int q = static_cast<int>(design.cols());
  const int r = static_cast<int>(effects.cols());
  const Eigen::MatrixXd omega_inv = Eigen::MatrixXd(st.omega).llt().solve(Eigen::MatrixXd::Identity(r, r));
  const Eigen::MatrixXd xtx = design.transpose() * design;
  const Eigen::MatrixXd xty = design.transpose() * effects;
  // vec stacks the columns of B.
  Eigen::MatrixXd prec = Eigen::kroneckerProduct(omega_inv, xtx);
  prec.diagonal().array() += 1.0 / prior.coef_var;
  const Eigen::MatrixXd lin_m = xty * omega_inv;
  const Eigen::VectorXd lin = Eigen::Map<const Eigen::VectorXd>(lin_m.data(), q * r);
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  if (llt.info() != Eigen::Success) throw DecompositionError("simple regression: coefficient precision not PD");
  Eigen::VectorXd zv(q * r);
  for (int i = 0; i < q * r; ++i) zv(i) = std_normal(rng);
  const Eigen::VectorXd b = llt.solve(lin) + llt.matrixU().solve(zv);
  st.coef = Eigen::Map<const Eigen::MatrixXd>(b.data(), q, r);
  const Eigen::MatrixXd resid = effects - design * st.coef;
  Mat scatter = prior.scale;
  for (int i = 0; i < n; ++i) scatter += resid.row(i).transpose() * resid.row(i);
  st.omega = inverse_wishart_sample(prior.dof + n, detail::symmetrized(scatter), rng);
  return st;
}

inline std::vector<MvnParams> simple_effect_priors(const SimpleRegressionState& st, const Eigen::MatrixXd& design) {
  std::vector<MvnParams> out(design.rows());
  for (int j = 0; j < design.rows(); ++j) {
    out[j].mean = (design.row(j) * st.coef).transpose();
    out[j].cov = st.omega;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Driver

struct Draw {
  int iteration = 0;
  Eigen::VectorXd nu, mu, beta_b, gamma_b;
  double sigma_s = 0.0, sigma_y = 0.0;
  ClusterState clusters;  // simple: one cluster, phi = vec(B), sigma = Omega, alpha = 0
};

struct PosteriorDraws {
  SecondStage second_stage = SecondStage::dpm;
  int n_groups = 0;
  NiwParams base;
  std::vector<Draw> draws;

  int size() const { return static_cast<int>(draws.size()); }
  std::vector<double> mu_draws(int j) const {
    std::vector<double> out(draws.size());
    for (size_t t = 0; t < draws.size(); ++t) out[t] = draws[t].mu(j);
    return out;
  }
  std::vector<int> label_draws(int j) const {
    std::vector<int> out(draws.size());
    for (size_t t = 0; t < draws.size(); ++t) out[t] = draws[t].clusters.labels[j];
    return out;
  }
};

// Test seams for the driver.
struct ChainOptions {
  std::optional<ClusterState> frozen_clusters;  // skip steps 1-3 and keep this state
  std::optional<double> fixed_alpha;
};

namespace detail {

inline Eigen::MatrixXd second_stage_rows(SecondStage s, const Eigen::VectorXd& nu, const Eigen::VectorXd& mu,
                                         const Eigen::MatrixXd& z) {
  const int e = n_effect_columns(s);
  Eigen::MatrixXd rows(z.rows(), e + z.cols());
  if (e == 2) {
    rows.col(0) = nu;
    rows.col(1) = mu;
  } else {
    rows.col(0) = mu;
  }
  rows.rightCols(z.cols()) = z;
  return rows;
}

}  // namespace detail

/// Full interleaved sampler. Groups whose outcomes are masked in `data`
/// have no outcome likelihood, so their mu_j follows the conditional prior.
inline PosteriorDraws run_chain(const Stage1Data& data, const Eigen::MatrixXd& z, const DpmConfig& cfg, Rng& rng,
                                const ChainOptions& opts = {}) {
  cfg.validate();
  const int n = data.n_groups();
  if (z.rows() != n) throw DomainError("run_chain: need one Z row per group");
  const int d = static_cast<int>(z.cols());
  const SecondStage mode = cfg.second_stage;
  const int n_eff = n_effect_columns(mode);
  const bool use_s = mode != SecondStage::null;

  InitialEstimates init = fit_initial_estimates(data);
  // Masked groups have no outcome estimate; start them at the weighted mean
  // of the others.
  {
    double sw = 0.0, s = 0.0;
    for (int j = 0; j < n; ++j)
      if (!data.y_masked[j]) {
        sw += init.n[j];
        s += init.n[j] * init.mu_hat[j];
      }
    for (int j = 0; j < n; ++j)
      if (data.y_masked[j]) init.mu_hat[j] = s / sw;
  }
  Stage1State s1 = initial_stage1_state(data, init);
  if (!use_s) {
    s1.nu.setZero();
    s1.beta_b.setZero();
  }

  std::vector<double> weights(n);
  for (int j = 0; j < n; ++j) weights[j] = data.y_masked[j] ? 0.0 : init.n[j];
  const Eigen::MatrixXd rows0 = detail::second_stage_rows(mode, s1.nu, s1.mu, z);

  PosteriorDraws out;
  out.second_stage = mode;
  out.n_groups = n;
  out.draws.reserve(cfg.chain.n_retained());

  Stage1Priors priors;
  priors.tau = cfg.tau;
  priors.nuisance_cov = cfg.nuisance_cov;
  priors.precision_prior = cfg.precision_prior;

  ClusterState clusters;
  std::optional<NiwSampler> g0;
  SimpleRegressionPrior sprior;
  SimpleRegressionState sstate;
  Eigen::MatrixXd design;

  if (mode == SecondStage::simple) {
    const NiwParams full = build_base_measure(rows0, weights, d, cfg.scale_matrix_inverted);
    out.base = full;
    sprior.coef_var = cfg.simple_coef_var;
    sprior.dof = d + 2.0;
    sprior.scale = full.scale_matrix.topLeftCorner(2, 2);
    design = simple_design(z);
    sstate.coef = Eigen::MatrixXd::Zero(d + 1, 2);
    sstate.omega = sprior.scale;
  } else {
    out.base = cfg.base_measure ? *cfg.base_measure : build_base_measure(rows0, weights, d, cfg.scale_matrix_inverted);
    if (out.base.dim() != n_eff + d) throw DomainError("run_chain: base measure has the wrong dimension");
    g0.emplace(out.base);
    if (opts.frozen_clusters) {
      clusters = *opts.frozen_clusters;
      if (!clusters.is_compact() || static_cast<int>(clusters.labels.size()) != n)
        throw DomainError("run_chain: frozen cluster state is not valid");
    } else {
      clusters = init_clusters(rows0, out.base, std::min(cfg.chain.k_init, n), cfg.alpha_prior, rng);
    }
    if (opts.fixed_alpha) clusters.alpha = *opts.fixed_alpha;
  }

  for (int it = 0; it < cfg.chain.n_iter; ++it) {
    const Eigen::MatrixXd rows = detail::second_stage_rows(mode, s1.nu, s1.mu, z);
    if (mode == SecondStage::simple) {
      sstate = update_simple_regression(std::move(sstate), rows.leftCols(2), design, sprior, rng);
      priors.effect_priors = simple_effect_priors(sstate, design);
    } else {
      if (!opts.frozen_clusters) {
        clusters = update_assignments(std::move(clusters), rows, *g0, cfg.n_aux, rng);
        clusters = update_cluster_params(std::move(clusters), rows, out.base, rng);
        clusters.alpha = opts.fixed_alpha
                             ? *opts.fixed_alpha
                             : update_alpha(clusters.k(), n, cfg.alpha_prior, clusters.alpha, rng,
                                            cfg.paper_literal_alpha);
      }
      priors.effect_priors = conditional_effect_priors(clusters, z, n_eff);
    }
    s1 = gibbs_update_stage1(std::move(s1), priors, data, rng, use_s);
    if (!s1.finite() || !std::isfinite(stage1_loglik(s1, data, use_s)))
      throw DivergenceError("non-finite stage-1 state", it);

    if (it >= cfg.chain.burn_in && (it - cfg.chain.burn_in + 1) % cfg.chain.thin == 0) {
      Draw dr;
      dr.iteration = it;
      dr.nu = s1.nu;
      dr.mu = s1.mu;
      dr.beta_b = s1.beta_b;
      dr.gamma_b = s1.gamma_b;
      dr.sigma_s = s1.sigma_s;
      dr.sigma_y = s1.sigma_y;
      if (mode == SecondStage::simple) {
        ClusterParams cp;
        cp.phi = Eigen::Map<const Eigen::VectorXd>(sstate.coef.data(), sstate.coef.size());
        cp.sigma = sstate.omega;
        dr.clusters.labels.assign(n, 0);
        dr.clusters.omegas = {cp};
        dr.clusters.alpha = 0.0;
      } else {
        dr.clusters = clusters;
      }
      out.draws.push_back(std::move(dr));
    }
  }
  return out;
}

inline PosteriorDraws run_chain(const std::vector<SubjectRecord>& subjects, int n_treatments, int n_biomarkers,
                                const Eigen::MatrixXd& z, const DpmConfig& cfg, Rng& rng,
                                std::span<const int> masked_groups = {}) {
  return run_chain(make_stage1_data(subjects, n_treatments, n_biomarkers, masked_groups), z, cfg, rng);
}

/// Long-format dump: iteration,parameter,index,value. Group and cluster
/// indices are 1-based; cluster parameters are named phi_<a> and
/// sigma_<a>_<b> with the cluster in the index column.
inline void write_posterior_dump(std::ostream& os, const PosteriorDraws& pd) {
  os << "iteration,parameter,index,value\n";
  auto num = [](double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
  };
  for (const auto& dr : pd.draws) {
    const int t = dr.iteration + 1;
    auto vec = [&](const char* name, const Eigen::VectorXd& v) {
      for (int i = 0; i < v.size(); ++i) os << t << ',' << name << ',' << i + 1 << ',' << num(v(i)) << '\n';
    };
    if (pd.second_stage != SecondStage::null) {
      vec("nu", dr.nu);
      vec("beta_b", dr.beta_b);
      os << t << ",sigma_s,1," << num(dr.sigma_s) << '\n';
    }
    vec("mu", dr.mu);
    vec("gamma_b", dr.gamma_b);
    os << t << ",sigma_y,1," << num(dr.sigma_y) << '\n';
    if (pd.second_stage != SecondStage::simple) os << t << ",alpha,1," << num(dr.clusters.alpha) << '\n';
    for (size_t j = 0; j < dr.clusters.labels.size(); ++j)
      os << t << ",label," << j + 1 << ',' << dr.clusters.labels[j] + 1 << '\n';
    for (int c = 0; c < dr.clusters.k(); ++c) {
      const auto& o = dr.clusters.omegas[c];
      for (int a = 0; a < o.phi.size(); ++a) os << t << ",phi_" << a + 1 << ',' << c + 1 << ',' << num(o.phi(a)) << '\n';
      for (int a = 0; a < o.sigma.rows(); ++a)
        for (int b = a; b < o.sigma.cols(); ++b)
          os << t << ",sigma_" << a + 1 << '_' << b + 1 << ',' << c + 1 << ',' << num(o.sigma(a, b)) << '\n';
    }
  }
}

}  // namespace dpsurr
