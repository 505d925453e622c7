#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cdim/core.hpp"
#include "cdim/measurement.hpp"

namespace cdim {

enum class Objective { l2, kl_discrete, kl_gaussian, pearson_gaussian };

inline const char* to_string(Objective o) {
  switch (o) {
    case Objective::l2: return "l2";
    case Objective::kl_discrete: return "kl_discrete";
    case Objective::kl_gaussian: return "kl_gaussian";
    case Objective::pearson_gaussian: return "pearson_gaussian";
  }
  return "?";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "l2") return Objective::l2;
  if (s == "kl_discrete") return Objective::kl_discrete;
  if (s == "kl_gaussian") return Objective::kl_gaussian;
  if (s == "pearson_gaussian") return Objective::pearson_gaussian;
  throw ParameterError("unknown objective '" + s + "'");
}

/// Target residual histogram: B buckets delimited by B+1 increasing edges.
/// The outermost buckets also absorb residuals beyond the first/last edge.
struct BucketHistogram {
  Vec edges;
  Vec target;

  std::size_t buckets() const { return target.size(); }

  double min_width() const {
    double w = edges[1] - edges[0];
    for (std::size_t b = 1; b < buckets(); ++b) w = std::min(w, edges[b + 1] - edges[b]);
    return w;
  }
};

/// Uniformly spaced edges over [lo, hi].
inline Vec uniform_edges(double lo, double hi, std::size_t buckets) {
  require(buckets >= 1 && hi > lo, "uniform_edges: need hi > lo and buckets >= 1");
  Vec e(buckets + 1);
  for (std::size_t b = 0; b <= buckets; ++b)
    e[b] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(buckets);
  return e;
}

/// Bucket probabilities of N(0, σ²); outer buckets extend to ±∞.
inline BucketHistogram gaussian_buckets(double sigma, Vec edges) {
  require(sigma > 0.0 && edges.size() >= 3, "gaussian_buckets: need sigma > 0 and >= 2 buckets");
  const std::size_t B = edges.size() - 1;
  auto cdf = [&](double x) { return 0.5 * std::erfc(-x / (sigma * std::sqrt(2.0))); };
  BucketHistogram h{edges, Vec(B)};
  for (std::size_t b = 0; b < B; ++b) {
    const double lo = b == 0 ? 0.0 : cdf(edges[b]);
    const double hi = b + 1 == B ? 1.0 : cdf(edges[b + 1]);
    h.target[b] = hi - lo;
  }
  return h;
}

/// Bucket probabilities of the two-point law P(+a) = p, P(-a) = 1-p.
inline BucketHistogram bimodal_buckets(double amplitude, double p, Vec edges) {
  require(edges.size() >= 3, "bimodal_buckets: need >= 2 buckets");
  const std::size_t B = edges.size() - 1;
  BucketHistogram h{edges, Vec(B, 0.0)};
  auto bucket_of = [&](double r) {
    std::size_t b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), r) - edges.begin());
    return std::clamp<std::size_t>(b == 0 ? 0 : b - 1, 0, B - 1);
  };
  h.target[bucket_of(amplitude)] += p;
  h.target[bucket_of(-amplitude)] += 1.0 - p;
  return h;
}

struct ConstraintSpec {
  Objective objective = Objective::l2;
  double sigma2 = 1.0;             // kl_gaussian: target noise variance
  BucketHistogram histogram;       // kl_discrete
  double smoothing_eps = 1e-8;     // probability floor for the empirical histogram
  double bin_width = -1.0;         // soft-binning kernel width; <0 = narrowest bucket, 0 = hard bins
  bool paper_variant_kl = false;   // printed (un-halved log term) Gaussian KL
  double poisson_scale = 1.0;      // pearson_gaussian: s
  double pearson_floor = 1e-6;     // pearson_gaussian: clamp for Ax̂ in the rate

  void validate() const {
    switch (objective) {
      case Objective::l2: break;
      case Objective::kl_gaussian: require(sigma2 > 0.0, "constraint: sigma2 must be > 0"); break;
      case Objective::pearson_gaussian:
        require(poisson_scale > 0.0 && pearson_floor > 0.0, "constraint: poisson scale and floor must be > 0");
        break;
      case Objective::kl_discrete: {
        const auto& h = histogram;
        require(h.buckets() >= 2, "constraint: need B >= 2 buckets");
        require(h.edges.size() == h.buckets() + 1, "constraint: need B+1 bucket edges");
        for (std::size_t b = 0; b < h.buckets(); ++b) {
          require(h.edges[b + 1] > h.edges[b], "constraint: bucket edges must increase");
          require(h.target[b] >= 0.0, "constraint: negative target probability");
        }
        double total = 0.0;
        for (double r : h.target) total += r;
        require(std::abs(total - 1.0) <= 1e-9, "constraint: target histogram must sum to 1");
        require(smoothing_eps > 0.0 && smoothing_eps <= 1e-3, "constraint: smoothing_eps must lie in (0, 1e-3]");
        break;
      }
    }
  }

  double effective_bin_width() const { return bin_width < 0.0 ? histogram.min_width() : bin_width; }
};

// ---- residuals and moments ---------------------------------------------------

inline Vec residual_additive(ConstSpan y, ConstSpan axhat) {
  require(y.size() == axhat.size(), "residual_additive: dimension mismatch");
  return sub(y, axhat);
}

/// s(y − Ax̂)/sqrt(s·max(Ax̂, floor)).
inline Vec residual_pearson(ConstSpan y, ConstSpan axhat, double s, double floor = 1e-6) {
  require(y.size() == axhat.size(), "residual_pearson: dimension mismatch");
  require(s > 0.0 && floor > 0.0, "residual_pearson: scale and floor must be > 0");
  Vec r(y.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = s * (y[i] - axhat[i]) / std::sqrt(s * std::max(axhat[i], floor));
  return r;
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;  // population (1/d) convention
};

inline Moments empirical_moments(ConstSpan r) {
  require(r.size() >= 2, "empirical_moments: need at least 2 residuals");
  const double d = static_cast<double>(r.size());
  Moments m;
  for (double v : r) m.mean += v;
  m.mean /= d;
  for (double v : r) m.variance += (v - m.mean) * (v - m.mean);
  m.variance /= d;
  return m;
}

/// KL(N(μ̂, σ̂²) ‖ N(0, σ²)). paper_variant uses log(σ²/σ̂²) without the ½.
inline double gaussian_kl(double mean, double variance, double sigma2, bool paper_variant = false) {
  require(variance > 0.0 && sigma2 > 0.0, "gaussian_kl: variances must be > 0");
  const double log_coef = paper_variant ? 1.0 : 0.5;
  return log_coef * std::log(sigma2 / variance) + (variance + mean * mean) / (2.0 * sigma2) - 0.5;
}

// ---- soft histogram ------------------------------------------------------------

namespace detail {

// Triangular kernel with half-width h: CDF and density at offset u.
inline double tri_cdf(double u, double h) {
  if (u <= -h) return 0.0;
  if (u >= h) return 1.0;
  if (u <= 0.0) return (u + h) * (u + h) / (2.0 * h * h);
  return 1.0 - (h - u) * (h - u) / (2.0 * h * h);
}

inline double tri_pdf(double u, double h) {
  const double a = std::abs(u);
  return a >= h ? 0.0 : (h - a) / (h * h);
}

}  // namespace detail

struct SoftHistogram {
  Vec mass;             // empirical bucket probabilities (sum to 1)
  std::size_t clipped;  // residuals beyond the outermost edges
};

/// Each residual spreads unit mass over buckets with a triangular kernel of
/// total width `width` (so at most two buckets when width <= bucket width).
/// width == 0 gives ordinary hard binning.
inline SoftHistogram soft_histogram(ConstSpan r, const BucketHistogram& h, double width) {
  const std::size_t B = h.buckets();
  SoftHistogram out{Vec(B, 0.0), 0};
  const double inv_d = 1.0 / static_cast<double>(r.size());
  const double half = 0.5 * width;
  for (double v : r) {
    if (v < h.edges.front() || v > h.edges.back()) ++out.clipped;
    if (half <= 0.0) {
      auto it = std::upper_bound(h.edges.begin() + 1, h.edges.end() - 1, v);
      out.mass[static_cast<std::size_t>(it - (h.edges.begin() + 1))] += inv_d;
      continue;
    }
    double below = 0.0;  // kernel CDF at the bucket's lower edge
    for (std::size_t b = 0; b < B; ++b) {
      const double above = b + 1 == B ? 1.0 : detail::tri_cdf(h.edges[b + 1] - v, half);
      out.mass[b] += (above - below) * inv_d;
      below = above;
    }
  }
  return out;
}

struct DiscreteKl {
  double value = 0.0;
  SoftHistogram histogram;
  Vec floored;  // floored, renormalised empirical probabilities
};

/// Σ_b r_B(b) log(r_B(b)/p̂(b)) with p̂ the soft histogram of the residuals,
/// floored at smoothing_eps and renormalised.
inline DiscreteKl discrete_kl_eval(ConstSpan r, const ConstraintSpec& spec) {
  require(!r.empty(), "discrete_kl: empty residual vector");
  const auto& h = spec.histogram;
  DiscreteKl out;
  out.histogram = soft_histogram(r, h, spec.effective_bin_width());
  const std::size_t B = h.buckets();
  out.floored.resize(B);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    out.floored[b] = std::max(out.histogram.mass[b], spec.smoothing_eps);
    total += out.floored[b];
  }
  for (double& q : out.floored) q /= total;
  for (std::size_t b = 0; b < B; ++b)
    if (h.target[b] > 0.0) out.value += h.target[b] * std::log(h.target[b] / out.floored[b]);
  return out;
}

inline double discrete_kl(ConstSpan r, const ConstraintSpec& spec) { return discrete_kl_eval(r, spec).value; }

// ---- objective with gradient -------------------------------------------------

struct ObjectiveEval {
  double value = 0.0;
  Vec grad_axhat;           // ∂value/∂(Ax̂₀)
  Vec grad_xhat0;           // Aᵀ grad_axhat
  Moments residual;         // moments of the residuals the objective sees
  std::size_t clipped = 0;  // kl_discrete only
};

namespace detail {

// Gaussian-KL over the empirical moments of r; returns value and ∂/∂r.
inline double moment_kl_with_grad(ConstSpan r, double sigma2, bool paper_variant, Moments& mom, Vec& grad_r) {
  mom = empirical_moments(r);
  const double var = std::max(mom.variance, 1e-300);
  const double value = gaussian_kl(mom.mean, var, sigma2, paper_variant);
  const double log_coef = paper_variant ? 1.0 : 0.5;
  const double d = static_cast<double>(r.size());
  const double dmu = mom.mean / sigma2;
  const double dvar = -log_coef / var + 1.0 / (2.0 * sigma2);
  grad_r.resize(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) grad_r[i] = dmu / d + dvar * 2.0 * (r[i] - mom.mean) / d;
  return value;
}

}  // namespace detail

/// Objective value and exact gradient w.r.t. Ax̂₀ (op-free part).
inline ObjectiveEval objective_value_and_grad_axhat(const ConstraintSpec& spec, ConstSpan y, ConstSpan axhat) {
  require(y.size() == axhat.size(), "objective: dimension mismatch between y and Ax̂");
  const std::size_t d = y.size();
  ObjectiveEval ev;
  ev.grad_axhat.assign(d, 0.0);
  switch (spec.objective) {
    case Objective::l2: {
      const Vec r = residual_additive(y, axhat);
      ev.value = dot(r, r) / static_cast<double>(d);
      for (std::size_t i = 0; i < d; ++i) ev.grad_axhat[i] = -2.0 * r[i] / static_cast<double>(d);
      if (d >= 2) ev.residual = empirical_moments(r);
      break;
    }
    case Objective::kl_gaussian: {
      const Vec r = residual_additive(y, axhat);
      Vec gr;
      ev.value = detail::moment_kl_with_grad(r, spec.sigma2, spec.paper_variant_kl, ev.residual, gr);
      for (std::size_t i = 0; i < d; ++i) ev.grad_axhat[i] = -gr[i];
      break;
    }
    case Objective::pearson_gaussian: {
      const double s = spec.poisson_scale;
      const Vec r = residual_pearson(y, axhat, s, spec.pearson_floor);
      Vec gr;
      ev.value = detail::moment_kl_with_grad(r, 1.0, spec.paper_variant_kl, ev.residual, gr);
      for (std::size_t i = 0; i < d; ++i) {
        double dr_da;
        if (axhat[i] > spec.pearson_floor) {
          const double a = axhat[i];
          dr_da = std::sqrt(s) * (-1.0 / std::sqrt(a) - (y[i] - a) / (2.0 * a * std::sqrt(a)));
        } else {
          dr_da = -s / std::sqrt(s * spec.pearson_floor);
        }
        ev.grad_axhat[i] = gr[i] * dr_da;
      }
      break;
    }
    case Objective::kl_discrete: {
      const Vec r = residual_additive(y, axhat);
      const auto kl = discrete_kl_eval(r, spec);
      ev.value = kl.value;
      ev.clipped = kl.histogram.clipped;
      if (d >= 2) ev.residual = empirical_moments(r);
      const auto& h = spec.histogram;
      const std::size_t B = h.buckets();
      // ∂KL/∂p̃_c = -r_c/p̃_c + 1/S for unfloored buckets, 0 where the floor is active.
      double S = 0.0;
      Vec pf(B);
      for (std::size_t b = 0; b < B; ++b) {
        pf[b] = std::max(kl.histogram.mass[b], spec.smoothing_eps);
        S += pf[b];
      }
      Vec dkl_dmass(B, 0.0);
      for (std::size_t b = 0; b < B; ++b)
        if (kl.histogram.mass[b] > spec.smoothing_eps) dkl_dmass[b] = -h.target[b] / pf[b] + 1.0 / S;
      const double half = 0.5 * spec.effective_bin_width();
      if (half > 0.0) {
        for (std::size_t i = 0; i < d; ++i) {
          // mass_b(r) = F(e_{b+1} - r) - F(e_b - r), outer edges at ±∞.
          double g = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            const double upper = b + 1 == B ? 0.0 : -detail::tri_pdf(h.edges[b + 1] - r[i], half);
            const double lower = b == 0 ? 0.0 : -detail::tri_pdf(h.edges[b] - r[i], half);
            g += dkl_dmass[b] * (upper - lower);
          }
          // ∂mass/∂r carries 1/d; ∂r/∂Ax̂ = -1.
          ev.grad_axhat[i] = -g / static_cast<double>(d);
        }
      }
      break;
    }
  }
  return ev;
}

/// Objective value and gradient w.r.t. x̂₀ (chained through Aᵀ).
inline ObjectiveEval objective_value_and_grad(const ConstraintSpec& spec, ConstSpan y, ConstSpan axhat,
                                              const LinearOperator& op) {
  require(op.d() == y.size(), "objective: operator output size does not match y");
  auto ev = objective_value_and_grad_axhat(spec, y, axhat);
  ev.grad_xhat0 = op.adjoint(ev.grad_axhat);
  return ev;
}

}  // namespace cdim
