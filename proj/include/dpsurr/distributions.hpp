#pragma once

// Probability kernel for the samplers: multivariate normal, the
// normal-inverse-Wishart conjugate family, Gamma/Beta helpers, skew-normal
// and a tail-robust truncated normal.
//
// NIW convention used throughout:
//   Sigma ~ InvWishart(dof, scale_matrix)     E[Sigma] = scale_matrix / (dof - p - 1)
//   phi | Sigma ~ N(location, Sigma / kappa)
// All log-densities go through a Cholesky factor; nothing is inverted
// explicitly except the (tiny) triangular factors themselves.

#include <Eigen/Dense>
#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "random.hpp"

namespace dpsurr {

inline constexpr int kMaxDim = 8;

// Small dense types with a compile-time capacity: no heap traffic in the
// inner sampler loops.
using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct MvnParams {
  Vec mean;
  Mat cov;
  int dim() const { return static_cast<int>(mean.size()); }
};

struct NiwParams {
  Vec location;
  double kappa = 1.0;
  double dof = 1.0;
  Mat scale_matrix;
  int dim() const { return static_cast<int>(location.size()); }
};

struct GammaParams {
  double shape = 1.0;
  double rate = 1.0;
};

// One mixture component (phi, Sigma).
struct ClusterParams {
  Vec phi;
  Mat sigma;
};

namespace detail {

inline double symmetry_error(const Mat& a) {
  if (a.size() == 0) return 0.0;
  return (a - a.transpose()).cwiseAbs().rowwise().sum().maxCoeff();
}

inline Eigen::LLT<Mat> checked_llt(const Mat& a, const char* what) {
  if (a.rows() != a.cols()) throw DecompositionError(std::string(what) + ": matrix is not square");
  if (symmetry_error(a) >= 1e-10 * std::max(1.0, a.cwiseAbs().maxCoeff()))
    throw DecompositionError(std::string(what) + ": matrix is not symmetric");
  Eigen::LLT<Mat> llt(a);
  if (llt.info() != Eigen::Success || !llt.matrixL().toDenseMatrix().allFinite())
    throw DecompositionError(std::string(what) + ": matrix is not positive definite");
  return llt;
}

inline Mat symmetrized(const Mat& a) { return 0.5 * (a + a.transpose()); }

}  // namespace detail

inline bool is_symmetric_pd(const Mat& a) {
  if (a.rows() != a.cols() || a.rows() == 0) return false;
  if (detail::symmetry_error(a) >= 1e-10) return false;
  Eigen::LLT<Mat> llt(a);
  return llt.info() == Eigen::Success;
}

inline void validate(const MvnParams& p) {
  if (p.cov.rows() != p.mean.size() || p.cov.cols() != p.mean.size())
    throw DomainError("MvnParams: mean length does not match covariance dimension");
  detail::checked_llt(p.cov, "MvnParams covariance");
}

inline void validate(const NiwParams& p) {
  const int d = p.dim();
  if (p.scale_matrix.rows() != d || p.scale_matrix.cols() != d)
    throw DomainError("NiwParams: location length does not match scale matrix dimension");
  if (!(p.kappa > 0.0)) throw DomainError("NiwParams: kappa must be positive");
  if (!(p.dof >= d)) throw DomainError("NiwParams: dof must be >= dimension");
  detail::checked_llt(p.scale_matrix, "NiwParams scale matrix");
}

inline void validate(const GammaParams& g) {
  if (!(g.shape > 0.0) || !(g.rate > 0.0)) throw DomainError("GammaParams: shape and rate must be positive");
}

// ---------------------------------------------------------------------------
// Scalar helpers

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Upper tail 1 - Phi(x), accurate for large x.
inline double normal_sf(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

inline double normal_logpdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * kLog2Pi - std::log(sd) - 0.5 * z * z;
}

inline double std_normal(Rng& rng) { return rng.normal(); }

inline double uniform01(Rng& rng) { return rng.uniform(); }

/// Gamma(shape, rate). Marsaglia-Tsang squeeze; shape < 1 via the
/// Gamma(shape + 1) * U^(1/shape) boost.
inline double gamma_sample(double shape, double rate, Rng& rng) {
  if (!(shape > 0.0) || !(rate > 0.0)) throw DomainError("gamma_sample: shape and rate must be positive");
  double boost = 1.0;
  if (shape < 1.0) {
    boost = std::pow(1.0 - rng.uniform(), 1.0 / shape);
    shape += 1.0;
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = 1.0 - rng.uniform();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2 || std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v)))
      return boost * d * v / rate;
  }
}

/// Chi-square with `dof` degrees of freedom; small integer dof are sums of
/// squared normals.
inline double chi_square_sample(double dof, Rng& rng) {
  if (dof == std::floor(dof) && dof >= 1.0 && dof <= 8.0) {
    double s = 0.0;
    for (int i = 0; i < static_cast<int>(dof); ++i) {
      const double z = rng.normal();
      s += z * z;
    }
    return s;
  }
  return 2.0 * gamma_sample(0.5 * dof, 1.0, rng);
}

inline double gamma_sample(const GammaParams& g, Rng& rng) { return gamma_sample(g.shape, g.rate, rng); }

inline double beta_sample(double a, double b, Rng& rng) {
  const double x = gamma_sample(a, 1.0, rng);
  const double y = gamma_sample(b, 1.0, rng);
  return x / (x + y);
}

// Standard skew-normal (location 0, scale 1) with slant `shape`.
inline double skew_normal_sample(double shape, Rng& rng) {
  const double delta = shape / std::sqrt(1.0 + shape * shape);
  const double u0 = std_normal(rng);
  const double u1 = std_normal(rng);
  return delta * std::abs(u0) + std::sqrt(1.0 - delta * delta) * u1;
}

/// Draw from N(mean, sd^2) restricted to (lower, inf).
///
/// Inverse CDF on the upper tail while the standardized bound is <= 5;
/// beyond that, Robert's exponential rejection sampler, whose acceptance
/// rate approaches 1 as the bound grows.
inline double trunc_normal_sample(double mean, double sd, double lower, Rng& rng) {
  if (!(sd > 0.0)) throw DomainError("trunc_normal_sample: sd must be positive");
  if (lower == -std::numeric_limits<double>::infinity()) return mean + sd * std_normal(rng);
  const double a = (lower - mean) / sd;
  double z;
  if (a <= 5.0) {
    const double tail = normal_sf(a);
    for (;;) {
      // u in (0, tail]; z = Q^{-1}(u)
      const double u = tail * (1.0 - uniform01(rng));
      z = std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * u);
      if (z > a) break;
    }
  } else {
    const double lambda = 0.5 * (a + std::sqrt(a * a + 4.0));
    for (;;) {
      z = a + std::exponential_distribution<double>(lambda)(rng);
      const double accept = std::exp(-0.5 * (z - lambda) * (z - lambda));
      if (uniform01(rng) <= accept && z > a) break;
    }
  }
  return mean + sd * z;
}

// ---------------------------------------------------------------------------
// Multivariate normal

inline double mvn_logpdf(const Vec& x, const MvnParams& p) {
  if (x.size() != p.mean.size()) throw DomainError("mvn_logpdf: dimension mismatch");
  const auto llt = detail::checked_llt(p.cov, "mvn_logpdf");
  const Vec r = llt.matrixL().solve(x - p.mean);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * (p.dim() * kLog2Pi + logdet + r.squaredNorm());
}

inline Vec mvn_sample(const MvnParams& p, Rng& rng) {
  const auto llt = detail::checked_llt(p.cov, "mvn_sample");
  Vec z(p.dim());
  for (int i = 0; i < p.dim(); ++i) z(i) = std_normal(rng);
  return p.mean + llt.matrixL() * z;
}

/// Conditional law of the unobserved coordinates given x[observed_idx].
/// The result is indexed by the complementary coordinates in increasing order.
inline MvnParams mvn_condition(const MvnParams& p, std::span<const int> observed_idx, const Vec& observed_values) {
  const int d = p.dim();
  if (observed_idx.empty()) return p;
  if (static_cast<int>(observed_idx.size()) >= d)
    throw DomainError("mvn_condition: must leave at least one coordinate unobserved");
  if (observed_values.size() != static_cast<Eigen::Index>(observed_idx.size()))
    throw DomainError("mvn_condition: observed value count mismatch");
  std::vector<char> is_obs(d, 0);
  for (int i : observed_idx) {
    if (i < 0 || i >= d || is_obs[i]) throw DomainError("mvn_condition: invalid observed index");
    is_obs[i] = 1;
  }
  std::vector<int> free;
  for (int i = 0; i < d; ++i)
    if (!is_obs[i]) free.push_back(i);
  const int nf = static_cast<int>(free.size());
  const int no = static_cast<int>(observed_idx.size());

  Mat s_ff(nf, nf), s_fo(nf, no), s_oo(no, no);
  Vec m_f(nf), r_o(no);
  for (int a = 0; a < nf; ++a) {
    m_f(a) = p.mean(free[a]);
    for (int b = 0; b < nf; ++b) s_ff(a, b) = p.cov(free[a], free[b]);
    for (int b = 0; b < no; ++b) s_fo(a, b) = p.cov(free[a], observed_idx[b]);
  }
  for (int a = 0; a < no; ++a) {
    r_o(a) = observed_values(a) - p.mean(observed_idx[a]);
    for (int b = 0; b < no; ++b) s_oo(a, b) = p.cov(observed_idx[a], observed_idx[b]);
  }
  const auto llt = detail::checked_llt(detail::symmetrized(s_oo), "mvn_condition observed block");
  const Mat gain_t = llt.solve(Mat(s_fo.transpose()));  // Soo^{-1} Sof
  MvnParams out;
  out.mean = m_f + gain_t.transpose() * r_o;
  out.cov = detail::symmetrized(s_ff - s_fo * gain_t);
  return out;
}

// ---------------------------------------------------------------------------
// Normal-inverse-Wishart

struct SuffStats {
  int n = 0;
  Vec sum;
  Mat outer;  // sum of x x^T

  explicit SuffStats(int dim = 0) : sum(Vec::Zero(dim)), outer(Mat::Zero(dim, dim)) {}

  template <class Row>
  void add(const Row& x) {
    ++n;
    sum += x;
    outer.noalias() += x * x.transpose();
  }
};

inline NiwParams niw_posterior(const NiwParams& prior, const SuffStats& st) {
  if (st.n == 0) return prior;
  const double n = st.n;
  const Vec xbar = st.sum / n;
  const Mat scatter = st.outer - n * xbar * xbar.transpose();
  NiwParams post;
  post.kappa = prior.kappa + n;
  post.dof = prior.dof + n;
  post.location = (prior.kappa * prior.location + st.sum) / post.kappa;
  const Vec diff = xbar - prior.location;
  post.scale_matrix =
      detail::symmetrized(prior.scale_matrix + scatter + (prior.kappa * n / post.kappa) * diff * diff.transpose());
  return post;
}

/// Conjugate update with the rows of `data` (n x p). n = 0 returns the prior.
inline NiwParams niw_posterior(const NiwParams& prior, const Eigen::Ref<const Eigen::MatrixXd>& data) {
  if (data.rows() == 0) return prior;
  if (data.cols() != prior.dim()) throw DomainError("niw_posterior: data dimension mismatch");
  // Two-pass centred scatter keeps the result order-invariant to rounding.
  const double n = static_cast<double>(data.rows());
  const Vec xbar = data.colwise().mean().transpose();
  Mat scatter = Mat::Zero(prior.dim(), prior.dim());
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    const Vec r = data.row(i).transpose() - xbar;
    scatter.noalias() += r * r.transpose();
  }
  NiwParams post;
  post.kappa = prior.kappa + n;
  post.dof = prior.dof + n;
  post.location = (prior.kappa * prior.location + n * xbar) / post.kappa;
  const Vec diff = xbar - prior.location;
  post.scale_matrix =
      detail::symmetrized(prior.scale_matrix + scatter + (prior.kappa * n / post.kappa) * diff * diff.transpose());
  return post;
}

/// Log of the NIW predictive density at x: a multivariate Student-t with
/// dof - p + 1 degrees of freedom and scale scale_matrix (kappa+1) / (kappa (dof-p+1)).
inline double niw_marginal_logpdf(const Vec& x, const NiwParams& prior) {
  const int p = prior.dim();
  if (x.size() != p) throw DomainError("niw_marginal_logpdf: dimension mismatch");
  const double nu = prior.dof - p + 1.0;
  if (!(nu > 0.0)) throw DomainError("niw_marginal_logpdf: dof must exceed dimension - 1");
  const Mat shape = prior.scale_matrix * ((prior.kappa + 1.0) / (prior.kappa * nu));
  const auto llt = detail::checked_llt(detail::symmetrized(shape), "niw_marginal_logpdf");
  const Vec r = llt.matrixL().solve(x - prior.location);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return std::lgamma(0.5 * (nu + p)) - std::lgamma(0.5 * nu) - 0.5 * p * std::log(nu * std::numbers::pi) -
         0.5 * logdet - 0.5 * (nu + p) * std::log1p(r.squaredNorm() / nu);
}

/// Gaussian density evaluator stored as a precision factor Q, Sigma^{-1} = Q Q^T.
struct GaussianKernel {
  Vec mean;
  Mat prec_factor;
  double log_norm = 0.0;

  static GaussianKernel from_covariance(const Vec& mean, const Mat& cov) {
    const auto llt = detail::checked_llt(cov, "GaussianKernel");
    const int p = static_cast<int>(mean.size());
    GaussianKernel k;
    k.mean = mean;
    // Sigma = L L^T  =>  Sigma^{-1} = L^{-T} L^{-1}, so Q = L^{-T}.
    const Mat linv = llt.matrixL().solve(Mat::Identity(p, p));
    k.prec_factor = linv.transpose();
    k.log_norm = -0.5 * p * kLog2Pi - llt.matrixLLT().diagonal().array().log().sum();
    return k;
  }

  template <class V>
  double logpdf(const V& x) const {
    const Vec r = prec_factor.transpose() * (x - mean);
    return log_norm - 0.5 * r.squaredNorm();
  }
};

/// Draws (phi, Sigma) from an NIW law. The Cholesky factor of the inverse
/// scale matrix is computed once so repeated draws cost O(p^2) plus the
/// Bartlett variates.
class NiwSampler {
 public:
  explicit NiwSampler(const NiwParams& params) : params_(params) {
    validate(params);
    const int p = params.dim();
    if (!(params.dof > p - 1)) throw DomainError("NiwSampler: dof must exceed dimension - 1");
    const auto llt = detail::checked_llt(params.scale_matrix, "NiwSampler scale matrix");
    const Mat inv = llt.solve(Mat::Identity(p, p));
    inv_scale_chol_ = detail::checked_llt(detail::symmetrized(inv), "NiwSampler inverse scale").matrixL();
  }

  const NiwParams& params() const { return params_; }

  /// Kernel of a fresh draw; Sigma itself is not formed.
  GaussianKernel draw_kernel(Rng& rng) const {
    const int p = params_.dim();
    Mat a = Mat::Zero(p, p);
    for (int i = 0; i < p; ++i) {
      a(i, i) = std::sqrt(chi_square_sample(params_.dof - i, rng));
      for (int j = 0; j < i; ++j) a(i, j) = std_normal(rng);
    }
    // Precision W = M M^T ~ Wishart(dof, scale^{-1}) with M lower triangular.
    const Mat m = (inv_scale_chol_ * a).triangularView<Eigen::Lower>();
    Vec z(p);
    for (int i = 0; i < p; ++i) z(i) = std_normal(rng);
    GaussianKernel k;
    k.mean = params_.location + m.transpose().triangularView<Eigen::Upper>().solve(z) / std::sqrt(params_.kappa);
    k.prec_factor = m;
    k.log_norm = -0.5 * p * kLog2Pi + m.diagonal().array().abs().log().sum();
    return k;
  }

  static ClusterParams to_params(const GaussianKernel& k) {
    const int p = static_cast<int>(k.mean.size());
    const Mat qinv = k.prec_factor.fullPivLu().solve(Mat::Identity(p, p));
    ClusterParams out;
    out.phi = k.mean;
    out.sigma = detail::symmetrized(qinv.transpose() * qinv);
    return out;
  }

  ClusterParams draw(Rng& rng) const { return to_params(draw_kernel(rng)); }

 private:
  NiwParams params_;
  Mat inv_scale_chol_;
};

inline ClusterParams niw_sample(const NiwParams& params, Rng& rng) { return NiwSampler(params).draw(rng); }

/// Sigma ~ InvWishart(dof, scale), via a Bartlett draw of Sigma^{-1}.
inline Mat inverse_wishart_sample(double dof, const Mat& scale, Rng& rng) {
  NiwParams p;
  p.location = Vec::Zero(scale.rows());
  p.kappa = 1.0;
  p.dof = dof;
  p.scale_matrix = scale;
  return NiwSampler(p).draw(rng).sigma;
}

}  // namespace dpsurr
