#pragma once

// Ground-truth machinery for verification: exact GMM posteriors under a
// linear-Gaussian observation, sampling, two-sample energy distance with a
// permutation null, finite differences and 1-D quadrature.
//
// This is the only place operators are materialised as dense matrices, so
// it is meant for small problems (n <= 64).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "cdim/core.hpp"
#include "cdim/measurement.hpp"
#include "cdim/score.hpp"

namespace cdim {

/// Mixture with dense component covariances.
struct PosteriorGmm {
  Vec weights;
  std::vector<Vec> means;
  std::vector<Eigen::MatrixXd> covariances;

  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }

  Vec mean() const {
    Vec m(dim(), 0.0);
    for (std::size_t k = 0; k < components(); ++k) axpy(weights[k], means[k], m);
    return m;
  }
};

/// Dense d×n matrix of a linear operator (column j = A e_j).
inline Eigen::MatrixXd materialize(const LinearOperator& op) {
  require(op.n() <= 4096, "materialize: operator too large for dense oracle use");
  Eigen::MatrixXd A(op.d(), op.n());
  Vec e(op.n(), 0.0);
  for (std::size_t j = 0; j < op.n(); ++j) {
    e[j] = 1.0;
    const Vec col = op.apply(e);
    for (std::size_t i = 0; i < op.d(); ++i) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = col[i];
    e[j] = 0.0;
  }
  return A;
}

inline Eigen::VectorXd to_eigen(ConstSpan v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Vec from_eigen(const Eigen::VectorXd& v) { return Vec(v.data(), v.data() + v.size()); }

/// p(x₀ | y) for y = A x₀ + N(0, σ² I) under a diagonal GMM prior; exact by
/// componentwise conjugacy, weights via log-evidence N(y; A m_k, A C_k Aᵀ + σ² I).
inline PosteriorGmm exact_posterior(const GmmPrior& prior, const LinearOperator& op, double sigma2_obs, ConstSpan y) {
  prior.validate();
  require(sigma2_obs > 0.0, "exact_posterior: sigma2_obs must be > 0");
  require(op.n() == prior.dim() && op.d() == y.size(), "exact_posterior: dimension mismatch");
  const Eigen::MatrixXd A = materialize(op);
  const auto d = static_cast<Eigen::Index>(op.d());
  const auto n = static_cast<Eigen::Index>(op.n());
  const Eigen::VectorXd yv = to_eigen(y);
  const Eigen::MatrixXd AtA = A.transpose() * A / sigma2_obs;
  const Eigen::VectorXd Aty = A.transpose() * yv / sigma2_obs;
  constexpr double log2pi = 1.8378770664093454836;

  PosteriorGmm post;
  Vec logw(prior.components());
  for (std::size_t k = 0; k < prior.components(); ++k) {
    const Eigen::VectorXd m = to_eigen(prior.means[k]);
    const Eigen::VectorXd v = to_eigen(prior.variances[k]);
    Eigen::MatrixXd precision = AtA;
    precision.diagonal() += v.cwiseInverse();
    Eigen::LLT<Eigen::MatrixXd> llt_p(precision);
    if (llt_p.info() != Eigen::Success) throw NumericError("exact_posterior: singular posterior precision");
    const Eigen::MatrixXd cov = llt_p.solve(Eigen::MatrixXd::Identity(n, n));
    const Eigen::VectorXd mean = cov * (m.cwiseQuotient(v) + Aty);

    Eigen::MatrixXd S = A * v.asDiagonal() * A.transpose();
    S.diagonal().array() += sigma2_obs;
    Eigen::LLT<Eigen::MatrixXd> llt_s(S);
    if (llt_s.info() != Eigen::Success) throw NumericError("exact_posterior: singular evidence covariance");
    const Eigen::VectorXd resid = yv - A * m;
    const Eigen::VectorXd white = llt_s.matrixL().solve(resid);
    const double logdet = 2.0 * llt_s.matrixL().toDenseMatrix().diagonal().array().log().sum();
    logw[k] = std::log(prior.weights[k]) - 0.5 * (static_cast<double>(d) * log2pi + logdet + white.squaredNorm());

    post.means.push_back(from_eigen(mean));
    post.covariances.push_back(0.5 * (cov + cov.transpose()));
  }
  const double lse = log_sum_exp(logw);
  for (double lw : logw) post.weights.push_back(std::exp(lw - lse));
  return post;
}

/// I.i.d. draws: component by weight, then mean + L z.
inline std::vector<Vec> sample_gmm(const PosteriorGmm& g, std::size_t count, std::uint64_t seed) {
  require(count >= 1, "sample_gmm: count must be >= 1");
  std::vector<Eigen::MatrixXd> chol;
  for (const auto& c : g.covariances) {
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    if (llt.info() != Eigen::Success) throw NumericError("sample_gmm: covariance not positive definite");
    chol.push_back(llt.matrixL());
  }
  Rng rng(seed, 0x5a3e);
  std::vector<Vec> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t k = rng.categorical(g.weights);
    const Vec z = rng.normal_vec(g.dim());
    const Eigen::VectorXd x = to_eigen(g.means[k]) + chol[k] * to_eigen(z);
    out.push_back(from_eigen(x));
  }
  return out;
}

inline std::vector<Vec> sample_gmm(const GmmPrior& g, std::size_t count, std::uint64_t seed) {
  require(count >= 1, "sample_gmm: count must be >= 1");
  Rng rng(seed, 0x5a3e);
  std::vector<Vec> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t k = rng.categorical(g.weights);
    Vec x(g.dim());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = g.means[k][i] + std::sqrt(g.variances[k][i]) * rng.normal();
    out.push_back(std::move(x));
  }
  return out;
}

// ---- energy distance -------------------------------------------------------------

namespace detail {

inline double euclid(ConstSpan a, ConstSpan b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline double mean_pair_distance(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  double s = 0.0;
  for (const auto& u : a)
    for (const auto& v : b) s += euclid(u, v);
  return s / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

}  // namespace detail

/// V-statistic 2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖ over all pairs (diagonal included).
/// The arguments are put in a canonical order first, so ed(a,b) == ed(b,a)
/// bit for bit.
inline double energy_distance(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  require(!a.empty() && !b.empty(), "energy_distance: sample sets must be non-empty");
  if (b < a) return energy_distance(b, a);
  return 2.0 * detail::mean_pair_distance(a, b) - detail::mean_pair_distance(a, a) -
         detail::mean_pair_distance(b, b);
}

/// Energy distances of random relabellings of the pooled sample (first |a|
/// items vs the rest). Sorted ascending.
inline Vec energy_permutation_null(const std::vector<Vec>& a, const std::vector<Vec>& b, int permutations,
                                   std::uint64_t seed) {
  require(!a.empty() && !b.empty() && permutations >= 1, "energy_permutation_null: bad arguments");
  std::vector<Vec> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t N = pooled.size(), na = a.size(), nb = b.size();
  std::vector<double> D(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) D[i * N + j] = D[j * N + i] = detail::euclid(pooled[i], pooled[j]);

  Rng rng(seed, 0x9e11);
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<char> in_a(N);
  Vec null;
  null.reserve(static_cast<std::size_t>(permutations));
  for (int p = 0; p < permutations; ++p) {
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (std::size_t i = 0; i < N; ++i) in_a[idx[i]] = i < na ? 1 : 0;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double* row = &D[i * N];
      for (std::size_t j = 0; j < N; ++j) {
        if (in_a[i] && in_a[j]) saa += row[j];
        else if (!in_a[i] && !in_a[j]) sbb += row[j];
        else sab += row[j];
      }
    }
    // sab counts every cross pair twice.
    const double ab = sab / (2.0 * static_cast<double>(na * nb));
    null.push_back(2.0 * ab - saa / static_cast<double>(na * na) - sbb / static_cast<double>(nb * nb));
  }
  std::sort(null.begin(), null.end());
  return null;
}

/// Empirical quantile of a sorted sample (linear interpolation).
inline double quantile_sorted(const Vec& sorted, double q) {
  require(!sorted.empty() && q >= 0.0 && q <= 1.0, "quantile_sorted: bad arguments");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// ---- derivative and integral checkers --------------------------------------------

/// Central differences (f(x + h e_i) − f(x − h e_i)) / 2h.
inline Vec finite_diff_grad(const std::function<double(ConstSpan)>& f, ConstSpan x, double h = 1e-5) {
  require(h > 0.0, "finite_diff_grad: h must be > 0");
  Vec xp(x.begin(), x.end());
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Adaptive Gauss–Kronrod over [a, b] (infinite bounds allowed).
inline double integrate(const std::function<double(double)>& f, double a, double b, double rel_tol = 1e-12) {
  using boost::math::quadrature::gauss_kronrod;
  return gauss_kronrod<double, 61>::integrate(f, a, b, 15, rel_tol);
}

/// E[x₀ | x_t] for a 1-D mixture by quadrature of x₀·q(x₀)·N(x_t; √ᾱ x₀, 1−ᾱ).
inline double posterior_mean_quadrature_1d(const GmmPrior& prior, double x_t, double alpha_bar) {
  require(prior.dim() == 1, "posterior_mean_quadrature_1d: prior must be 1-D");
  require(alpha_bar > 0.0 && alpha_bar < 1.0, "posterior_mean_quadrature_1d: alpha_bar must lie in (0,1)");
  const double sa = std::sqrt(alpha_bar), nv = 1.0 - alpha_bar;
  auto joint = [&](double x0) {
    double p = 0.0;
    for (std::size_t k = 0; k < prior.components(); ++k) {
      const double v = prior.variances[k][0];
      const double u = x0 - prior.means[k][0];
      p += prior.weights[k] * std::exp(-0.5 * u * u / v) / std::sqrt(2.0 * std::numbers::pi * v);
    }
    const double r = x_t - sa * x0;
    return p * std::exp(-0.5 * r * r / nv);
  };
  // Split at the component means so the narrow peaks are resolved.
  Vec pts{-std::numeric_limits<double>::infinity()};
  for (const auto& m : prior.means) pts.push_back(m[0]);
  pts.push_back(x_t / sa);
  pts.push_back(std::numeric_limits<double>::infinity());
  std::sort(pts.begin(), pts.end());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    if (pts[i] == pts[i + 1]) continue;
    num += integrate([&](double x0) { return x0 * joint(x0); }, pts[i], pts[i + 1]);
    den += integrate(joint, pts[i], pts[i + 1]);
  }
  return num / den;
}

struct ImportanceEstimate {
  Vec mean;
  Vec standard_error;
};

/// Self-normalised importance estimate of E[x₀ | x_t]: proposals from the
/// prior, weights N(x_t; √ᾱ x₀, (1−ᾱ) I). Delta-method standard errors.
inline ImportanceEstimate posterior_mean_importance(const GmmPrior& prior, ConstSpan x_t, double alpha_bar,
                                                    std::size_t samples, std::uint64_t seed) {
  require(alpha_bar > 0.0 && alpha_bar < 1.0, "posterior_mean_importance: alpha_bar must lie in (0,1)");
  const auto draws = sample_gmm(prior, samples, seed);
  const double sa = std::sqrt(alpha_bar), nv = 1.0 - alpha_bar;
  Vec logw(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    double q = 0.0;
    for (std::size_t i = 0; i < x_t.size(); ++i) {
      const double r = x_t[i] - sa * draws[s][i];
      q += r * r;
    }
    logw[s] = -0.5 * q / nv;
  }
  const double lse = log_sum_exp(logw);
  Vec w(samples);
  for (std::size_t s = 0; s < samples; ++s) w[s] = std::exp(logw[s] - lse);
  ImportanceEstimate est{Vec(x_t.size(), 0.0), Vec(x_t.size(), 0.0)};
  for (std::size_t s = 0; s < samples; ++s) axpy(w[s], draws[s], est.mean);
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    double v = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      const double dev = draws[s][i] - est.mean[i];
      v += w[s] * w[s] * dev * dev;
    }
    est.standard_error[i] = std::sqrt(v);
  }
  return est;
}

}  // namespace cdim
