#pragma once

// Scenario generators for true group effects and an adaptive platform-trial
// simulator producing subject-level data under the saturated stage-1 models.
//
// Indices are 0-based in memory (group j = m * K + k); files use 1-based ids.

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "distributions.hpp"
#include "errors.hpp"
#include "random.hpp"

namespace dpsurr {

enum class Scenario { nonlinear, linear, simple, null, inter, interhide, onetrt, twotrt, manybiom, nonlinearskew };

inline constexpr std::array<Scenario, 10> kAllScenarios = {
    Scenario::nonlinear, Scenario::linear,    Scenario::simple,   Scenario::null,     Scenario::inter,
    Scenario::interhide, Scenario::onetrt,    Scenario::twotrt,   Scenario::manybiom, Scenario::nonlinearskew};

inline std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::nonlinear: return "nonlinear";
    case Scenario::linear: return "linear";
    case Scenario::simple: return "simple";
    case Scenario::null: return "null";
    case Scenario::inter: return "inter";
    case Scenario::interhide: return "interhide";
    case Scenario::onetrt: return "onetrt";
    case Scenario::twotrt: return "twotrt";
    case Scenario::manybiom: return "manybiom";
    case Scenario::nonlinearskew: return "nonlinearskew";
  }
  return "?";
}

inline Scenario parse_scenario(std::string_view name) {
  for (auto s : kAllScenarios)
    if (to_string(s) == name) return s;
  throw DomainError("unknown scenario '" + std::string(name) + "'");
}

inline bool has_true_clusters(Scenario s) {
  return s == Scenario::inter || s == Scenario::interhide || s == Scenario::onetrt || s == Scenario::twotrt ||
         s == Scenario::manybiom;
}

struct ScenarioConfig {
  Scenario scenario = Scenario::linear;
  double c_z = 0.0;
  double c_u = 0.0;
  int n_treatments = 4;
  int n_biomarkers = 16;
  std::uint64_t seed = 1;
  // Prevalences of independent binary markers; when 2^size == n_biomarkers the
  // biomarker multinomial is their product distribution, otherwise uniform.
  std::vector<double> marker_prevalence = {0.6, 0.5, 0.5, 0.2};
  // Explicit biomarker probabilities; overrides marker_prevalence when non-empty.
  std::vector<double> biomarker_probs;
  double skew_shape = 4.0;

  int n_groups() const { return n_treatments * n_biomarkers; }

  /// "linear-0.0-0.0" style cell label.
  std::string label() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s-%.1f-%.1f", std::string(to_string(scenario)).c_str(), c_z, c_u);
    return buf;
  }

  void validate() const {
    if (n_treatments < 1 || n_biomarkers < 1) throw DomainError("ScenarioConfig: K and M must be >= 1");
  }

  std::vector<double> biomarker_probabilities() const {
    const int m_count = n_biomarkers;
    std::vector<double> p;
    if (!biomarker_probs.empty()) {
      if (static_cast<int>(biomarker_probs.size()) != m_count)
        throw DomainError("ScenarioConfig: biomarker_probs has wrong length");
      p = biomarker_probs;
    } else if (!marker_prevalence.empty() && (1 << marker_prevalence.size()) == m_count) {
      p.assign(m_count, 1.0);
      for (int m = 0; m < m_count; ++m)
        for (std::size_t b = 0; b < marker_prevalence.size(); ++b)
          p[m] *= ((m >> b) & 1) ? marker_prevalence[b] : 1.0 - marker_prevalence[b];
    } else {
      p.assign(m_count, 1.0 / m_count);
    }
    double total = 0.0;
    for (double v : p) {
      if (!(v >= 0.0)) throw DomainError("ScenarioConfig: negative biomarker probability");
      total += v;
    }
    if (!(total > 0.0)) throw DomainError("ScenarioConfig: biomarker probabilities sum to zero");
    for (double& v : p) v /= total;
    return p;
  }
};

struct GroupTruth {
  int j = 0;  // group index, j = m * K + k
  int m = 0;  // biomarker
  int k = 0;  // treatment
  double nu = 0.0;
  double mu = 0.0;
  double z = 0.0;
  double u = 0.0;
  std::optional<int> true_cluster;  // 1-based, scenarios with defined clusters only
};

struct SubjectRecord {
  double s = 0.0;
  double y_obs = 1.0;
  bool event = true;
  int treatment = -1;  // -1 = control
  int biomarker = 0;

  bool is_control() const { return treatment < 0; }
  int group(int n_treatments) const { return biomarker * n_treatments + treatment; }

  std::vector<int> w(int n_treatments) const {
    std::vector<int> v(n_treatments, 0);
    if (treatment >= 0) v[treatment] = 1;
    return v;
  }
  std::vector<int> b(int n_biomarkers) const {
    std::vector<int> v(n_biomarkers, 0);
    v[biomarker] = 1;
    return v;
  }
};

struct Censoring {
  double lower = 20.0;
  double upper = 60.0;
};

struct TrialConfig {
  int batch_size = 40;
  int horizon = 2600;
  int min_group_size = 2;
  double stop_alpha_benefit = 0.01;   // two-sided Welch p-value to close for benefit or harm
  double stop_alpha_futility = 0.8;  // close for futility when p exceeds this
  int min_n_for_test = 8;             // per arm and control before any stopping test
  int futility_min_n = 14;
  double rar_floor = 0.05;
  int rar_burn_in = 8;  // arms below this size get the neutral weight P = 0.5
  bool arm_closing = true;
  double sigma_s = 1.0;
  double sigma_y = 1.0;
  double log_time_intercept = 1.1;  // baseline log-time; sets the time scale for censoring
  std::optional<Censoring> censor;

  void validate() const {
    if (batch_size < 1) throw DomainError("TrialConfig: batch_size must be >= 1");
    if (min_group_size < 0) throw DomainError("TrialConfig: min_group_size must be >= 0");
    if (!(stop_alpha_benefit > 0.0 && stop_alpha_benefit < 1.0) ||
        !(stop_alpha_futility > 0.0 && stop_alpha_futility < 1.0))
      throw DomainError("TrialConfig: stop thresholds must lie in (0, 1)");
    if (censor && !(censor->lower < censor->upper)) throw DomainError("TrialConfig: censor lower must be < upper");
  }
};

// ---------------------------------------------------------------------------
// Group effects

namespace detail {

// Monotone linear spline with knots at -1, 0, 1; slopes 0.2, 1.5, 0.2, 1.5.
inline double nonlinear_f(double v) {
  auto pos = [](double x) { return x > 0.0 ? x : 0.0; };
  return 0.2 * v + 1.3 * pos(v + 1.0) - 1.3 * pos(v) + 1.3 * pos(v - 1.0);
}

// Biomarker category for the manybiom scenario: sizes 20/28/16 groups of 64,
// i.e. the first 5/16, next 7/16 and last 4/16 of the biomarkers.
inline int manybiom_category(int m, int n_biomarkers) {
  const double frac = (m + 0.5) / n_biomarkers;
  if (frac < 5.0 / 16.0) return 1;
  if (frac < 12.0 / 16.0) return 2;
  return 3;
}

}  // namespace detail

inline std::vector<GroupTruth> generate_group_effects(const ScenarioConfig& cfg, Rng& rng) {
  cfg.validate();
  const int K = cfg.n_treatments;
  const int M = cfg.n_biomarkers;
  const bool skew = cfg.scenario == Scenario::nonlinearskew;
  std::vector<GroupTruth> out(K * M);
  for (int m = 0; m < M; ++m) {
    for (int k = 0; k < K; ++k) {
      GroupTruth& g = out[m * K + k];
      g.j = m * K + k;
      g.m = m;
      g.k = k;
      g.nu = skew ? skew_normal_sample(cfg.skew_shape, rng) : std_normal(rng);
      double z_mean = 0.0, z_sd = 1.0;
      if (cfg.scenario == Scenario::twotrt) {
        z_mean = k - 0.5 * (K - 1);
      } else if (cfg.scenario == Scenario::manybiom) {
        z_mean = detail::manybiom_category(m, M) - 1.0;
        z_sd = 0.5;
      }
      g.z = skew ? skew_normal_sample(cfg.skew_shape, rng) : z_mean + z_sd * std_normal(rng);
      g.u = std_normal(rng);
    }
  }
  double nu_min = out.front().nu;
  for (const auto& g : out) nu_min = std::min(nu_min, g.nu);

  const double cz = cfg.c_z, cu = cfg.c_u;
  for (auto& g : out) {
    switch (cfg.scenario) {
      case Scenario::nonlinear:
      case Scenario::nonlinearskew:
        g.mu = -1.0 + detail::nonlinear_f(g.nu) + cz * std::abs(g.z) + cu * g.u;
        break;
      case Scenario::linear:
        g.mu = -1.0 + g.nu + cz * std::abs(g.z) + cu * g.u;
        break;
      case Scenario::simple:
        g.mu = -1.0 + g.nu + cz * g.z + cu * g.u;
        break;
      case Scenario::null:
        g.mu = -1.0 + cz * std::abs(g.z) + cu * g.u;
        break;
      case Scenario::inter:
        g.mu = (g.z < 0.0 ? g.nu : 0.0) + cu * g.u;
        g.true_cluster = g.z < 0.0 ? 1 : 2;
        break;
      case Scenario::interhide:
        g.mu = (g.u < 0.0 ? g.nu : 0.0) + cz * g.z;
        g.true_cluster = g.u < 0.0 ? 1 : 2;
        break;
      case Scenario::onetrt:
        g.mu = (g.k == 0 ? g.nu : 0.0) + cz * g.z + cu * g.u;
        g.true_cluster = g.k == 0 ? 1 : 2;
        break;
      case Scenario::twotrt:
        g.mu = (g.k <= 1 ? g.nu - nu_min : 0.0) + cz * g.z + cu * g.u;
        g.true_cluster = g.k <= 1 ? 1 : 2;
        break;
      case Scenario::manybiom: {
        const int cat = detail::manybiom_category(g.m, M);
        g.mu = 0.25 * (cat - 3) * (g.nu - nu_min) + cz * g.z + cu * g.u;
        g.true_cluster = cat;
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive trial

/// Randomization weights for one stratum at one batch boundary:
/// weights[0] is control, weights[1 + k] treatment k (0 when closed).
struct WeightSnapshot {
  int batch = 0;
  int biomarker = 0;
  std::vector<double> weights;
};

struct TrialLog {
  std::vector<WeightSnapshot> weights;
  std::vector<double> beta_b;   // true biomarker effects on S
  std::vector<double> gamma_b;  // true biomarker effects on log Y
  int enrolled = 0;
  int closed_benefit = 0;
  int closed_harm = 0;
  int closed_futility = 0;
};

namespace detail {

struct ArmStats {
  int n = 0;
  double sum = 0.0;
  double sumsq = 0.0;
  bool open = true;

  void add(double x) {
    ++n;
    sum += x;
    sumsq += x * x;
  }
  double mean() const { return n > 0 ? sum / n : 0.0; }
  double var() const { return n > 1 ? std::max(0.0, (sumsq - n * mean() * mean()) / (n - 1)) : 1.0; }
};

struct WelchResult {
  double t = 0.0;
  double p = 1.0;
};

inline WelchResult welch_test(const ArmStats& a, const ArmStats& b) {
  const double va = a.var() / a.n, vb = b.var() / b.n;
  const double se2 = va + vb;
  if (!(se2 > 0.0)) return {};
  const double t = (a.mean() - b.mean()) / std::sqrt(se2);
  const double df = se2 * se2 / (va * va / (a.n - 1) + vb * vb / (b.n - 1));
  boost::math::students_t dist(std::max(df, 1.0));
  return {t, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)))};
}

template <class Weights>
inline int draw_categorical(const Weights& w, Rng& rng) {
  double total = 0.0;
  for (double v : w) total += v;
  double u = uniform01(rng) * total;
  const int n = static_cast<int>(w.size());
  for (int i = 0; i < n; ++i) {
    u -= w[i];
    if (u < 0.0) return i;
  }
  for (int i = n - 1; i >= 0; --i)
    if (w[i] > 0.0) return i;
  return n - 1;
}

}  // namespace detail

/// Response-adaptive randomization weights for a stratum: control fixed at
/// 1/(1 + #open), open arms proportional to P(arm beats control) floored.
inline std::vector<double> randomization_weights(const detail::ArmStats& control,
                                                 const std::vector<detail::ArmStats>& arms, double floor,
                                                 int burn_in = 0) {
  const int K = static_cast<int>(arms.size());
  std::vector<double> w(K + 1, 0.0);
  int n_open = 0;
  for (const auto& a : arms) n_open += a.open;
  if (n_open == 0) {
    w[0] = 1.0;
    return w;
  }
  w[0] = 1.0 / (1.0 + n_open);
  double total = 0.0;
  for (int k = 0; k < K; ++k) {
    if (!arms[k].open) continue;
    double p = 0.5;
    if (arms[k].n >= std::max(2, burn_in) && control.n >= 2) {
      const double se = std::sqrt(arms[k].var() / arms[k].n + control.var() / control.n);
      if (se > 0.0) p = normal_cdf((arms[k].mean() - control.mean()) / se);
    }
    w[k + 1] = std::max(p, floor);
    total += w[k + 1];
  }
  for (int k = 0; k < K; ++k) w[k + 1] *= (1.0 - w[0]) / total;
  return w;
}

inline std::vector<SubjectRecord> apply_censoring(std::vector<SubjectRecord> data, double lower, double upper,
                                                  Rng& rng) {
  if (!(lower < upper)) throw DomainError("apply_censoring: lower must be < upper");
  for (auto& r : data) {
    const double c = upper - (upper - lower) * uniform01(rng);  // (lower, upper]
    if (c < r.y_obs) {
      r.y_obs = c;
      r.event = false;
    }
  }
  return data;
}

/// Run the adaptive platform trial and return subject-level records.
inline std::vector<SubjectRecord> simulate_trial(const std::vector<GroupTruth>& truth, const TrialConfig& tcfg,
                                                 const ScenarioConfig& cfg, Rng& rng, TrialLog* log = nullptr) {
  cfg.validate();
  tcfg.validate();
  const int K = cfg.n_treatments;
  const int M = cfg.n_biomarkers;
  if (static_cast<int>(truth.size()) != K * M) throw DomainError("simulate_trial: truth must have K*M groups");
  if (tcfg.horizon < M * (K + 1) * tcfg.min_group_size)
    throw InfeasibleError("simulate_trial: horizon " + std::to_string(tcfg.horizon) +
                          " cannot give every arm and control the minimum group size");

  const auto probs = cfg.biomarker_probabilities();
  std::vector<double> beta_b(M), gamma_b(M);
  for (int m = 0; m < M; ++m) {
    beta_b[m] = std_normal(rng);
    gamma_b[m] = tcfg.log_time_intercept + std_normal(rng);
  }

  std::vector<SubjectRecord> subjects;
  subjects.reserve(tcfg.horizon + 64);
  std::vector<detail::ArmStats> control(M);
  std::vector<std::vector<detail::ArmStats>> arms(M, std::vector<detail::ArmStats>(K));
  TrialLog local;

  auto enroll = [&](int m, int arm) {
    SubjectRecord r;
    r.biomarker = m;
    r.treatment = arm - 1;
    double s_mean = beta_b[m], y_mean = gamma_b[m];
    if (arm > 0) {
      const auto& g = truth[m * K + (arm - 1)];
      s_mean += g.nu;
      y_mean += g.mu;
    }
    r.s = s_mean + tcfg.sigma_s * std_normal(rng);
    const double logy = y_mean + tcfg.sigma_y * std_normal(rng);
    r.y_obs = std::exp(logy);
    r.event = true;
    if (arm == 0)
      control[m].add(logy);
    else
      arms[m][arm - 1].add(logy);
    subjects.push_back(r);
  };

  int batch = 0;
  while (static_cast<int>(subjects.size()) < tcfg.horizon) {
    std::vector<std::vector<double>> weights(M);
    for (int m = 0; m < M; ++m) {
      weights[m] = randomization_weights(control[m], arms[m], tcfg.rar_floor, tcfg.rar_burn_in);
      if (log) log->weights.push_back({batch, m, weights[m]});
    }
    const int n_batch = std::min(tcfg.batch_size, tcfg.horizon - static_cast<int>(subjects.size()));
    for (int b = 0; b < n_batch; ++b) {
      const int m = detail::draw_categorical(probs, rng);
      enroll(m, detail::draw_categorical(weights[m], rng));
    }
    if (tcfg.arm_closing) {
      for (int m = 0; m < M; ++m) {
        if (control[m].n < tcfg.min_n_for_test) continue;
        for (int k = 0; k < K; ++k) {
          auto& a = arms[m][k];
          if (!a.open || a.n < tcfg.min_n_for_test) continue;
          const auto res = detail::welch_test(a, control[m]);
          if (res.p < tcfg.stop_alpha_benefit) {
            a.open = false;
            (res.t > 0 ? local.closed_benefit : local.closed_harm)++;
          } else if (a.n >= tcfg.futility_min_n && res.p > tcfg.stop_alpha_futility) {
            a.open = false;
            local.closed_futility++;
          }
        }
      }
    }
    ++batch;
  }

  // Final period: route subjects from under-filled strata into the cells that
  // are still below the minimum size; others are screened out.
  auto deficit = [&]() {
    long d = 0;
    for (int m = 0; m < M; ++m) {
      d += std::max(0, tcfg.min_group_size - control[m].n);
      for (int k = 0; k < K; ++k) d += std::max(0, tcfg.min_group_size - arms[m][k].n);
    }
    return d;
  };
  const long cap = 20L * tcfg.horizon;
  long screened = 0;
  while (deficit() > 0) {
    if (++screened > cap)
      throw InfeasibleError("simulate_trial: could not fill minimum group sizes within the screening cap");
    const int m = detail::draw_categorical(probs, rng);
    if (control[m].n < tcfg.min_group_size) {
      enroll(m, 0);
      continue;
    }
    for (int k = 0; k < K; ++k) {
      if (arms[m][k].n < tcfg.min_group_size) {
        enroll(m, k + 1);
        break;
      }
    }
  }

  if (tcfg.censor) subjects = apply_censoring(std::move(subjects), tcfg.censor->lower, tcfg.censor->upper, rng);
  if (log) {
    local.weights = std::move(log->weights);
    local.beta_b = beta_b;
    local.gamma_b = gamma_b;
    local.enrolled = static_cast<int>(subjects.size());
    *log = std::move(local);
  }
  return subjects;
}

/// Treated subjects per group (length K*M).
inline std::vector<int> group_sizes(const std::vector<SubjectRecord>& data, int n_treatments, int n_biomarkers) {
  std::vector<int> n(n_treatments * n_biomarkers, 0);
  for (const auto& r : data)
    if (!r.is_control()) ++n[r.group(n_treatments)];
  return n;
}

}  // namespace dpsurr
