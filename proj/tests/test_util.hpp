#pragma once

#include <dpsurr/dpsurr.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

namespace dpsurr::testing {

inline double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

inline double var_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / (v.size() - 1);
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("dpsurr_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

// A short chain for tests that only need a few sweeps.
inline DpmConfig short_config(int n_iter = 60, int burn_in = 20, int thin = 2) {
  DpmConfig c = simulation_dpm_config();
  c.chain.n_iter = n_iter;
  c.chain.burn_in = burn_in;
  c.chain.thin = thin;
  return c;
}

// Small balanced design: K treatments, M biomarkers, n subjects per arm,
// S and log Y drawn around the given group effects.
inline std::vector<SubjectRecord> toy_subjects(int K, int M, int n, const std::vector<double>& nu,
                                               const std::vector<double>& mu, double sd, Rng& rng) {
  std::vector<SubjectRecord> out;
  for (int m = 0; m < M; ++m)
    for (int a = -1; a < K; ++a)
      for (int i = 0; i < n; ++i) {
        SubjectRecord r;
        r.biomarker = m;
        r.treatment = a;
        const double en = a < 0 ? 0.0 : nu[m * K + a];
        const double em = a < 0 ? 0.0 : mu[m * K + a];
        r.s = 0.3 * m + en + sd * rng.normal();
        r.y_obs = std::exp(1.0 - 0.2 * m + em + sd * rng.normal());
        out.push_back(r);
      }
  return out;
}

}  // namespace dpsurr::testing
