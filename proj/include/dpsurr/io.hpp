#pragma once

// Delimited-text formats.
//
//   dataset.csv     s,y_obs,event,w_1..w_K,b_1..b_M   one row per subject
//   covariates.csv  j,z_1..z_d                         one row per group
//   truth.csv       j,m,k,nu,mu,z,u,true_cluster       simulation truth
//
// Indices in files are 1-based; "NA" marks an undefined value. Doubles are
// written in shortest round-trip form, so a write/read cycle is exact.

#include <Eigen/Dense>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "trialgen.hpp"

namespace dpsurr::io {

inline std::string fmt(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw DataError(where + ": cannot parse '" + std::string(s) + "'");
  return v;
}

inline int parse_int(std::string_view s, const std::string& where) {
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw DataError(where + ": cannot parse '" + std::string(s) + "'");
  return v;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return is;
}

inline void close_checked(std::ofstream& os, const std::filesystem::path& path) {
  os.close();
  if (!os) throw Error("write failed: " + path.string());
}

// ---------------------------------------------------------------------------

inline void write_dataset(std::ostream& os, const std::vector<SubjectRecord>& data, int n_treatments,
                          int n_biomarkers) {
  os << "s,y_obs,event";
  for (int k = 0; k < n_treatments; ++k) os << ",w_" << k + 1;
  for (int m = 0; m < n_biomarkers; ++m) os << ",b_" << m + 1;
  os << '\n';
  for (const auto& r : data) {
    os << fmt(r.s) << ',' << fmt(r.y_obs) << ',' << (r.event ? 1 : 0);
    for (int k = 0; k < n_treatments; ++k) os << ',' << (r.treatment == k ? 1 : 0);
    for (int m = 0; m < n_biomarkers; ++m) os << ',' << (r.biomarker == m ? 1 : 0);
    os << '\n';
  }
}

struct DatasetShape {
  int n_treatments = 0;
  int n_biomarkers = 0;
};

/// Reads a dataset; K and M come from the w_/b_ header columns.
inline std::vector<SubjectRecord> read_dataset(std::istream& is, DatasetShape& shape, const std::string& name) {
  std::string line;
  if (!std::getline(is, line)) throw DataError(name + ": empty file");
  const auto header = split(line);
  if (header.size() < 4 || header[0] != "s" || header[1] != "y_obs" || header[2] != "event")
    throw DataError(name + ": header must start with s,y_obs,event");
  shape = {};
  for (std::size_t c = 3; c < header.size(); ++c) {
    if (header[c].starts_with("w_"))
      shape.n_treatments++;
    else if (header[c].starts_with("b_"))
      shape.n_biomarkers++;
    else
      throw DataError(name + ": unexpected column '" + std::string(header[c]) + "'");
  }
  if (shape.n_treatments < 1 || shape.n_biomarkers < 1) throw DataError(name + ": need w_ and b_ columns");
  std::vector<SubjectRecord> out;
  long row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(row);
    const auto f = split(line);
    if (f.size() != header.size()) throw DataError(where + ": wrong number of fields");
    SubjectRecord r;
    r.s = parse_double(f[0], where);
    r.y_obs = parse_double(f[1], where);
    const int ev = parse_int(f[2], where);
    if (ev != 0 && ev != 1) throw DataError(where + ": event must be 0 or 1");
    r.event = ev == 1;
    r.treatment = -1;
    r.biomarker = -1;
    for (int k = 0; k < shape.n_treatments; ++k)
      if (parse_int(f[3 + k], where) == 1) {
        if (r.treatment >= 0) throw DataError(where + ": more than one treatment indicator set");
        r.treatment = k;
      }
    for (int m = 0; m < shape.n_biomarkers; ++m)
      if (parse_int(f[3 + shape.n_treatments + m], where) == 1) {
        if (r.biomarker >= 0) throw DataError(where + ": more than one biomarker indicator set");
        r.biomarker = m;
      }
    if (r.biomarker < 0) throw DataError(where + ": no biomarker indicator set");
    out.push_back(r);
  }
  return out;
}

inline void write_covariates(std::ostream& os, const Eigen::MatrixXd& z) {
  os << "j";
  for (int c = 0; c < z.cols(); ++c) os << ",z_" << c + 1;
  os << '\n';
  for (int j = 0; j < z.rows(); ++j) {
    os << j + 1;
    for (int c = 0; c < z.cols(); ++c) os << ',' << fmt(z(j, c));
    os << '\n';
  }
}

inline Eigen::MatrixXd read_covariates(std::istream& is, int n_groups, const std::string& name) {
  std::string line;
  if (!std::getline(is, line)) throw DataError(name + ": empty file");
  const auto header = split(line);
  if (header.empty() || header[0] != "j") throw DataError(name + ": header must start with j");
  const int d = static_cast<int>(header.size()) - 1;
  Eigen::MatrixXd z(n_groups, d);
  std::vector<char> seen(n_groups, 0);
  long row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(row);
    const auto f = split(line);
    if (static_cast<int>(f.size()) != d + 1) throw DataError(where + ": wrong number of fields");
    const int j = parse_int(f[0], where) - 1;
    if (j < 0 || j >= n_groups) throw DataError(where + ": group index out of range");
    for (int c = 0; c < d; ++c) z(j, c) = parse_double(f[1 + c], where);
    seen[j] = 1;
  }
  for (int j = 0; j < n_groups; ++j)
    if (!seen[j]) throw DataError(name + ": no covariates for group " + std::to_string(j + 1));
  return z;
}

inline void write_truth(std::ostream& os, const std::vector<GroupTruth>& truth) {
  os << "j,m,k,nu,mu,z,u,true_cluster\n";
  for (const auto& g : truth) {
    os << g.j + 1 << ',' << g.m + 1 << ',' << g.k + 1 << ',' << fmt(g.nu) << ',' << fmt(g.mu) << ',' << fmt(g.z)
       << ',' << fmt(g.u) << ',' << (g.true_cluster ? std::to_string(*g.true_cluster) : std::string("NA")) << '\n';
  }
}

inline std::vector<GroupTruth> read_truth(std::istream& is, const std::string& name) {
  std::string line;
  if (!std::getline(is, line) || line != "j,m,k,nu,mu,z,u,true_cluster")
    throw DataError(name + ": unexpected header");
  std::vector<GroupTruth> out;
  long row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(row);
    const auto f = split(line);
    if (f.size() != 8) throw DataError(where + ": wrong number of fields");
    GroupTruth g;
    g.j = parse_int(f[0], where) - 1;
    g.m = parse_int(f[1], where) - 1;
    g.k = parse_int(f[2], where) - 1;
    g.nu = parse_double(f[3], where);
    g.mu = parse_double(f[4], where);
    g.z = parse_double(f[5], where);
    g.u = parse_double(f[6], where);
    if (f[7] != "NA") g.true_cluster = parse_int(f[7], where);
    if (g.j != static_cast<int>(out.size())) throw DataError(where + ": groups must be listed in order");
    out.push_back(g);
  }
  return out;
}

// Binary float64 matrix: int32 rows, int32 cols, row-major payload.
inline void write_matrix_bin(const std::filesystem::path& path, const std::vector<double>& values, int rows,
                             int cols) {
  auto os = open_out(path);
  const std::int32_t r = rows, c = cols;
  os.write(reinterpret_cast<const char*>(&r), sizeof r);
  os.write(reinterpret_cast<const char*>(&c), sizeof c);
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  close_checked(os, path);
}

inline std::vector<double> read_matrix_bin(const std::filesystem::path& path, int& rows, int& cols) {
  auto is = open_in(path);
  std::int32_t r = 0, c = 0;
  is.read(reinterpret_cast<char*>(&r), sizeof r);
  is.read(reinterpret_cast<char*>(&c), sizeof c);
  if (!is || r < 0 || c < 0) throw DataError(path.string() + ": bad matrix header");
  std::vector<double> v(static_cast<std::size_t>(r) * c);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!is) throw DataError(path.string() + ": truncated matrix");
  rows = r;
  cols = c;
  return v;
}

}  // namespace dpsurr::io
