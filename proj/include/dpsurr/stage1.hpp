#pragma once

// Saturated-mean Gaussian regressions for the surrogate S and the log-time
// outcome, and their conditionally conjugate Gibbs sweep.
//
// Within biomarker m the coefficients form an "arrowhead": a head
// (beta^B_m, gamma^B_m) shared by every subject of the stratum and one block
// (nu_mk, mu_mk) per treatment that only touches treated subjects. The joint
// Gaussian full conditional of a stratum is sampled exactly by drawing the
// head from its marginal (a Schur complement over the blocks) and then every
// block given the head.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "distributions.hpp"
#include "errors.hpp"
#include "random.hpp"
#include "trialgen.hpp"

namespace dpsurr {

/// Per-cell sufficient statistics. Cell index c = m * (K + 1) + a where
/// a = 0 is the control arm and a = k + 1 treatment k.
struct Stage1Data {
  struct Censored {
    int cell = 0;
    double log_c = 0.0;
  };

  int n_treatments = 0;
  int n_biomarkers = 0;
  std::vector<int> n;
  std::vector<double> sum_s, sum_s2;
  std::vector<int> n_event;
  std::vector<double> sum_logy, sum_logy2;  // over uncensored subjects
  std::vector<Censored> censored;
  std::vector<char> y_masked;  // per group

  int n_groups() const { return n_treatments * n_biomarkers; }
  int n_cells() const { return n_biomarkers * (n_treatments + 1); }
  int cell(int m, int arm) const { return m * (n_treatments + 1) + arm; }
  int group_of_cell(int c) const {
    const int a = c % (n_treatments + 1);
    return a == 0 ? -1 : (c / (n_treatments + 1)) * n_treatments + (a - 1);
  }
  bool cell_y_masked(int c) const {
    const int g = group_of_cell(c);
    return g >= 0 && y_masked[g];
  }
  int n_censored() const { return static_cast<int>(censored.size()); }
};

/// Build sufficient statistics, dropping the outcomes of `masked_groups`
/// (0-based). Surrogate values of masked groups are kept.
inline Stage1Data make_stage1_data(const std::vector<SubjectRecord>& subjects, int n_treatments, int n_biomarkers,
                                   std::span<const int> masked_groups = {}) {
  Stage1Data d;
  d.n_treatments = n_treatments;
  d.n_biomarkers = n_biomarkers;
  const int nc = d.n_cells();
  d.n.assign(nc, 0);
  d.sum_s.assign(nc, 0.0);
  d.sum_s2.assign(nc, 0.0);
  d.n_event.assign(nc, 0);
  d.sum_logy.assign(nc, 0.0);
  d.sum_logy2.assign(nc, 0.0);
  d.y_masked.assign(d.n_groups(), 0);
  for (int g : masked_groups) {
    if (g < 0 || g >= d.n_groups()) throw DataError("mask: group " + std::to_string(g + 1) + " does not exist");
    d.y_masked[g] = 1;
  }
  for (const auto& r : subjects) {
    if (r.biomarker < 0 || r.biomarker >= n_biomarkers || r.treatment < -1 || r.treatment >= n_treatments)
      throw DataError("subject record outside the K x M design");
    if (!(r.y_obs > 0.0)) throw DataError("subject record with non-positive observed time");
    const int c = d.cell(r.biomarker, r.treatment + 1);
    d.n[c]++;
    d.sum_s[c] += r.s;
    d.sum_s2[c] += r.s * r.s;
    const double ly = std::log(r.y_obs);
    if (r.event) {
      d.n_event[c]++;
      d.sum_logy[c] += ly;
      d.sum_logy2[c] += ly * ly;
    } else {
      d.censored.push_back({c, ly});
    }
  }
  // canonical traversal: cell order, then censoring value
  std::stable_sort(d.censored.begin(), d.censored.end(), [](const Stage1Data::Censored& a, const Stage1Data::Censored& b) {
    return a.cell != b.cell ? a.cell < b.cell : a.log_c < b.log_c;
  });
  for (int m = 0; m < n_biomarkers; ++m) {
    const int c = d.cell(m, 0);
    if (d.n[c] == 0 || d.n_event[c] == 0)
      throw DataError("biomarker " + std::to_string(m + 1) + " has no observed control outcomes");
  }
  return d;
}

struct InitialEstimates {
  std::vector<double> nu_hat, mu_hat, se_nu, se_mu;
  std::vector<int> n;  // treated subjects per group
  std::vector<double> beta_hat, gamma_hat;  // control means per biomarker
  double sigma_s_hat = 1.0;
  double sigma_y_hat = 1.0;
};

/// Least-squares fit of both saturated models. The design is saturated, so
/// every effect is a treated-minus-control difference of cell means. Censored
/// log-times enter at their censoring value; masked groups get NaN outcome
/// estimates.
inline InitialEstimates fit_initial_estimates(const Stage1Data& d) {
  const int K = d.n_treatments, M = d.n_biomarkers;
  InitialEstimates e;
  e.nu_hat.assign(K * M, 0.0);
  e.mu_hat.assign(K * M, 0.0);
  e.se_nu.assign(K * M, 0.0);
  e.se_mu.assign(K * M, 0.0);
  e.n.assign(K * M, 0);
  e.beta_hat.assign(M, 0.0);
  e.gamma_hat.assign(M, 0.0);

  std::vector<double> ysum(d.sum_logy), ysum2(d.sum_logy2);
  std::vector<int> yn(d.n_event);
  for (const auto& c : d.censored) {
    ysum[c.cell] += c.log_c;
    ysum2[c.cell] += c.log_c * c.log_c;
    yn[c.cell]++;
  }
  double ssr_s = 0.0, ssr_y = 0.0;
  int df_s = 0, df_y = 0;
  for (int c = 0; c < d.n_cells(); ++c) {
    if (d.n[c] > 0) {
      ssr_s += d.sum_s2[c] - d.sum_s[c] * d.sum_s[c] / d.n[c];
      df_s += d.n[c] - 1;
    }
    if (yn[c] > 0 && !d.cell_y_masked(c)) {
      ssr_y += ysum2[c] - ysum[c] * ysum[c] / yn[c];
      df_y += yn[c] - 1;
    }
  }
  e.sigma_s_hat = df_s > 0 ? std::sqrt(std::max(ssr_s, 1e-12) / df_s) : 1.0;
  e.sigma_y_hat = df_y > 0 ? std::sqrt(std::max(ssr_y, 1e-12) / df_y) : 1.0;

  for (int m = 0; m < M; ++m) {
    const int c0 = d.cell(m, 0);
    if (d.n[c0] == 0) throw DataError("missing cell: biomarker " + std::to_string(m + 1) + ", control");
    e.beta_hat[m] = d.sum_s[c0] / d.n[c0];
    e.gamma_hat[m] = ysum[c0] / yn[c0];
    for (int k = 0; k < K; ++k) {
      const int c = d.cell(m, k + 1);
      const int g = m * K + k;
      if (d.n[c] == 0)
        throw DataError("missing cell: biomarker " + std::to_string(m + 1) + ", treatment " + std::to_string(k + 1));
      e.n[g] = d.n[c];
      e.nu_hat[g] = d.sum_s[c] / d.n[c] - e.beta_hat[m];
      e.se_nu[g] = e.sigma_s_hat * std::sqrt(1.0 / d.n[c] + 1.0 / d.n[c0]);
      if (d.y_masked[g]) {
        e.mu_hat[g] = std::numeric_limits<double>::quiet_NaN();
        e.se_mu[g] = std::numeric_limits<double>::quiet_NaN();
      } else {
        e.mu_hat[g] = ysum[c] / yn[c] - e.gamma_hat[m];
        e.se_mu[g] = e.sigma_y_hat * std::sqrt(1.0 / yn[c] + 1.0 / yn[c0]);
      }
    }
  }
  return e;
}

inline InitialEstimates fit_initial_estimates(const std::vector<SubjectRecord>& data, int n_treatments,
                                              int n_biomarkers) {
  return fit_initial_estimates(make_stage1_data(data, n_treatments, n_biomarkers));
}

struct Stage1State {
  Eigen::VectorXd beta_b;   // M
  Eigen::VectorXd nu;       // K*M
  Eigen::VectorXd gamma_b;  // M
  Eigen::VectorXd mu;       // K*M
  double sigma_s = 1.0;
  double sigma_y = 1.0;
  Eigen::VectorXd imputed_logy;  // one per censored subject, in Stage1Data::censored order

  bool finite() const {
    return beta_b.allFinite() && nu.allFinite() && gamma_b.allFinite() && mu.allFinite() &&
           std::isfinite(sigma_s) && std::isfinite(sigma_y) && sigma_s > 0.0 && sigma_y > 0.0 &&
           imputed_logy.allFinite();
  }
};

struct Stage1Priors {
  double tau = 1e4;           // prior variance of each beta^B_m and gamma^B_m
  double nuisance_cov = 0.0;  // prior covariance between beta^B_m and gamma^B_m
  // Per group prior on (nu_j, mu_j); 1-dimensional (mu_j only) when the
  // surrogate regression is switched off.
  std::vector<MvnParams> effect_priors;
  GammaParams precision_prior{1.0, 1.0};  // on 1/sigma_s^2 and 1/sigma_y^2
  bool fix_variances = false;
};

inline Stage1State initial_stage1_state(const Stage1Data& d, const InitialEstimates& e) {
  const int K = d.n_treatments, M = d.n_biomarkers;
  Stage1State s;
  s.beta_b = Eigen::Map<const Eigen::VectorXd>(e.beta_hat.data(), M);
  s.gamma_b = Eigen::Map<const Eigen::VectorXd>(e.gamma_hat.data(), M);
  s.nu = Eigen::Map<const Eigen::VectorXd>(e.nu_hat.data(), K * M);
  s.mu = Eigen::Map<const Eigen::VectorXd>(e.mu_hat.data(), K * M);
  s.sigma_s = e.sigma_s_hat;
  s.sigma_y = e.sigma_y_hat;
  s.imputed_logy.resize(d.n_censored());
  for (int i = 0; i < d.n_censored(); ++i) s.imputed_logy(i) = d.censored[i].log_c + s.sigma_y;
  return s;
}

namespace detail {

template <int D>
using SmallMat = Eigen::Matrix<double, D, D>;
template <int D>
using SmallVec = Eigen::Matrix<double, D, 1>;

template <int D>
SmallVec<D> draw_gaussian_precision(const SmallMat<D>& prec, const SmallVec<D>& lin, Rng& rng) {
  Eigen::LLT<SmallMat<D>> llt(prec);
  if (llt.info() != Eigen::Success) throw DecompositionError("stage-1 conditional precision is not positive definite");
  SmallVec<D> z;
  for (int i = 0; i < D; ++i) z(i) = std_normal(rng);
  // mean = P^{-1} h; draw = mean + L^{-T} z
  return llt.solve(lin) + llt.matrixU().solve(z);
}

// One stratum. Coordinate 0 of every D-vector is the surrogate model when
// D == 2 and the outcome model otherwise.
template <int D>
void update_stratum(int m, Stage1State& st, const Stage1Priors& priors, const Stage1Data& d,
                    const std::vector<double>& ysum, Rng& rng) {
  const int K = d.n_treatments;
  const double ls = 1.0 / (st.sigma_s * st.sigma_s);
  const double ly = 1.0 / (st.sigma_y * st.sigma_y);

  SmallMat<D> head_prec;
  if constexpr (D == 2) {
    SmallMat<D> cov;
    cov << priors.tau, priors.nuisance_cov, priors.nuisance_cov, priors.tau;
    head_prec = cov.inverse();
  } else {
    head_prec(0, 0) = 1.0 / priors.tau;
  }
  SmallVec<D> head_lin = SmallVec<D>::Zero();

  auto cell_prec = [&](int c) {
    SmallVec<D> v;
    const double ny = d.cell_y_masked(c) ? 0.0 : d.n[c] * ly;
    if constexpr (D == 2) {
      v << d.n[c] * ls, ny;
    } else {
      v << ny;
    }
    return v;
  };
  auto cell_lin = [&](int c) {
    SmallVec<D> v;
    const double hy = d.cell_y_masked(c) ? 0.0 : ysum[c] * ly;
    if constexpr (D == 2) {
      v << d.sum_s[c] * ls, hy;
    } else {
      v << hy;
    }
    return v;
  };

  // Head: prior + every subject of the stratum.
  for (int a = 0; a <= K; ++a) {
    const int c = d.cell(m, a);
    head_prec.diagonal() += cell_prec(c);
    head_lin += cell_lin(c);
  }

  SmallMat<D> schur_prec = head_prec;
  SmallVec<D> schur_lin = head_lin;
  std::vector<SmallMat<D>> block_cov(K);
  std::vector<SmallVec<D>> block_lin(K);
  std::vector<SmallVec<D>> coupling(K);
  for (int k = 0; k < K; ++k) {
    const int g = m * K + k;
    const int c = d.cell(m, k + 1);
    const MvnParams& pr = priors.effect_priors[g];
    SmallMat<D> prior_cov;
    SmallVec<D> prior_mean;
    for (int a = 0; a < D; ++a) {
      prior_mean(a) = pr.mean(a);
      for (int b = 0; b < D; ++b) prior_cov(a, b) = pr.cov(a, b);
    }
    Eigen::LLT<SmallMat<D>> pllt(prior_cov);
    if (pllt.info() != Eigen::Success) throw DecompositionError("effect prior covariance is not positive definite");
    const SmallMat<D> prior_prec = pllt.solve(SmallMat<D>::Identity());
    coupling[k] = cell_prec(c);  // C_k is diagonal
    SmallMat<D> bp = prior_prec;
    bp.diagonal() += coupling[k];
    block_lin[k] = prior_prec * prior_mean + cell_lin(c);
    block_cov[k] = bp.inverse();
    const SmallMat<D> cdc = coupling[k].asDiagonal() * block_cov[k] * coupling[k].asDiagonal();
    schur_prec -= cdc;
    schur_lin -= coupling[k].asDiagonal() * (block_cov[k] * block_lin[k]);
  }
  schur_prec = 0.5 * (schur_prec + schur_prec.transpose()).eval();
  const SmallVec<D> head = draw_gaussian_precision<D>(schur_prec, schur_lin, rng);
  if constexpr (D == 2) {
    st.beta_b(m) = head(0);
    st.gamma_b(m) = head(1);
  } else {
    st.gamma_b(m) = head(0);
  }
  for (int k = 0; k < K; ++k) {
    const int g = m * K + k;
    const SmallVec<D> mean = block_cov[k] * (block_lin[k] - coupling[k].cwiseProduct(head));
    Eigen::LLT<SmallMat<D>> cl(block_cov[k]);
    if (cl.info() != Eigen::Success) throw DecompositionError("stage-1 block covariance is not positive definite");
    SmallVec<D> z;
    for (int i = 0; i < D; ++i) z(i) = std_normal(rng);
    const SmallVec<D> draw = mean + cl.matrixL() * z;
    if constexpr (D == 2) {
      st.nu(g) = draw(0);
      st.mu(g) = draw(1);
    } else {
      st.mu(g) = draw(0);
    }
  }
}

inline double cell_mean_y(const Stage1State& st, const Stage1Data& d, int c) {
  const int m = c / (d.n_treatments + 1);
  const int g = d.group_of_cell(c);
  return st.gamma_b(m) + (g >= 0 ? st.mu(g) : 0.0);
}

inline double cell_mean_s(const Stage1State& st, const Stage1Data& d, int c) {
  const int m = c / (d.n_treatments + 1);
  const int g = d.group_of_cell(c);
  return st.beta_b(m) + (g >= 0 ? st.nu(g) : 0.0);
}

}  // namespace detail

/// One full stage-1 sweep: (a) impute censored log-times from the truncated
/// normal above their censoring value, (b) draw every stratum's coefficients
/// jointly, (c) draw both precisions from their Gamma full conditionals.
/// With `use_surrogate == false` only the outcome model is updated (nu and
/// beta^B are left untouched) and effect priors are 1-dimensional.
inline Stage1State gibbs_update_stage1(Stage1State st, const Stage1Priors& priors, const Stage1Data& d, Rng& rng,
                                       bool use_surrogate = true) {
  const int K = d.n_treatments, M = d.n_biomarkers;
  if (static_cast<int>(priors.effect_priors.size()) != K * M)
    throw DomainError("gibbs_update_stage1: need one effect prior per group");
  const int effect_dim = use_surrogate ? 2 : 1;
  for (const auto& p : priors.effect_priors)
    if (p.dim() != effect_dim) throw DomainError("gibbs_update_stage1: effect prior has the wrong dimension");

  // (a) data augmentation for censored outcomes
  std::vector<double> ysum(d.sum_logy), ysum2(d.sum_logy2);
  if (st.imputed_logy.size() != d.n_censored()) st.imputed_logy.resize(d.n_censored());
  for (int i = 0; i < d.n_censored(); ++i) {
    const auto& c = d.censored[i];
    const double v = trunc_normal_sample(detail::cell_mean_y(st, d, c.cell), st.sigma_y, c.log_c, rng);
    st.imputed_logy(i) = v;
    ysum[c.cell] += v;
    ysum2[c.cell] += v * v;
  }

  // (b) coefficients, stratum by stratum in biomarker order
  for (int m = 0; m < M; ++m) {
    if (use_surrogate)
      detail::update_stratum<2>(m, st, priors, d, ysum, rng);
    else
      detail::update_stratum<1>(m, st, priors, d, ysum, rng);
  }

  // (c) precisions
  if (!priors.fix_variances) {
    const auto& g = priors.precision_prior;
    if (use_surrogate) {
      double ssr = 0.0;
      long n = 0;
      for (int c = 0; c < d.n_cells(); ++c) {
        const double mu_c = detail::cell_mean_s(st, d, c);
        ssr += d.sum_s2[c] - 2.0 * mu_c * d.sum_s[c] + d.n[c] * mu_c * mu_c;
        n += d.n[c];
      }
      st.sigma_s = 1.0 / std::sqrt(gamma_sample(g.shape + 0.5 * n, g.rate + 0.5 * std::max(ssr, 0.0), rng));
    }
    double ssr = 0.0;
    long n = 0;
    for (int c = 0; c < d.n_cells(); ++c) {
      if (d.cell_y_masked(c)) continue;
      // completed data: every subject of the cell, imputed ones included
      const double mu_c = detail::cell_mean_y(st, d, c);
      ssr += ysum2[c] - 2.0 * mu_c * ysum[c] + d.n[c] * mu_c * mu_c;
      n += d.n[c];
    }
    st.sigma_y = 1.0 / std::sqrt(gamma_sample(g.shape + 0.5 * n, g.rate + 0.5 * std::max(ssr, 0.0), rng));
  }
  return st;
}

/// Completed-data log-likelihood (both regressions, unmasked outcomes).
inline double stage1_loglik(const Stage1State& st, const Stage1Data& d, bool use_surrogate = true) {
  std::vector<double> ysum(d.sum_logy), ysum2(d.sum_logy2);
  for (int i = 0; i < d.n_censored(); ++i) {
    const double v = st.imputed_logy(i);
    ysum[d.censored[i].cell] += v;
    ysum2[d.censored[i].cell] += v * v;
  }
  double ll = 0.0;
  for (int c = 0; c < d.n_cells(); ++c) {
    if (use_surrogate) {
      const double m = detail::cell_mean_s(st, d, c);
      const double ss = d.sum_s2[c] - 2.0 * m * d.sum_s[c] + d.n[c] * m * m;
      ll += -0.5 * d.n[c] * (kLog2Pi + 2.0 * std::log(st.sigma_s)) - 0.5 * ss / (st.sigma_s * st.sigma_s);
    }
    if (!d.cell_y_masked(c)) {
      const double m = detail::cell_mean_y(st, d, c);
      const double ss = ysum2[c] - 2.0 * m * ysum[c] + d.n[c] * m * m;
      ll += -0.5 * d.n[c] * (kLog2Pi + 2.0 * std::log(st.sigma_y)) - 0.5 * ss / (st.sigma_y * st.sigma_y);
    }
  }
  return ll;
}

}  // namespace dpsurr
