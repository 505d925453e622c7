#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cdim/core.hpp"
#include "cdim/schedule.hpp"

namespace cdim {

/// A point on the diffusion time axis: the integer step plus its alpha_bar.
struct Timestep {
  int t = 0;
  double alpha_bar = 1.0;
};

inline Timestep timestep(const NoiseSchedule& s, int t) { return {t, s.alpha_bar(t)}; }

// ---- plug-in relations between x_t, eps and the Tweedie estimate -----------

/// x̂₀ = (x_t - sqrt(1-ᾱ) eps) / sqrt(ᾱ)
inline Vec xhat_from_eps(ConstSpan x_t, ConstSpan eps, double alpha_bar) {
  if (!(alpha_bar > 0.0)) throw NumericError("xhat_from_eps: alpha_bar must be > 0");
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  Vec out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - b * eps[i]) / a;
  return out;
}

/// eps = (x_t - sqrt(ᾱ) x̂₀) / sqrt(1-ᾱ); undefined at ᾱ ∈ {0, 1}.
inline Vec eps_from_xhat(ConstSpan x_t, ConstSpan xhat0, double alpha_bar) {
  if (!(alpha_bar > 0.0 && alpha_bar < 1.0))
    throw NumericError("eps_from_xhat: alpha_bar must lie strictly inside (0,1)");
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  Vec out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - a * xhat0[i]) / b;
  return out;
}

/// Deterministic (accelerated) DDIM update from noise level alpha_t to the
/// less noisy level alpha_next, re-noising the Tweedie estimate with the
/// implied eps.
inline Vec ddim_step(ConstSpan x_t, ConstSpan xhat0, double alpha_t, double alpha_next) {
  require(alpha_t > 0.0 && alpha_t <= 1.0 && alpha_next > 0.0 && alpha_next <= 1.0,
          "ddim_step: alpha values must lie in (0,1]");
  require(alpha_next >= alpha_t, "ddim_step: alpha_next must be >= alpha_t");
  if (alpha_next == alpha_t) return Vec(x_t.begin(), x_t.end());
  if (alpha_next == 1.0) return Vec(xhat0.begin(), xhat0.end());
  if (alpha_t == 1.0) throw NumericError("ddim_step: cannot re-noise a noiseless input");
  const double sa_t = std::sqrt(alpha_t);
  const double sb_t = std::sqrt(1.0 - alpha_t);
  const double sa_n = std::sqrt(alpha_next);
  const double sb_n = std::sqrt(1.0 - alpha_next);
  Vec out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double eps = (x_t[i] - sa_t * xhat0[i]) / sb_t;
    out[i] = sa_n * xhat0[i] + sb_n * eps;
  }
  return out;
}

// ---- score model interface --------------------------------------------------

/// Anything that predicts the noise in x_t. The Tweedie estimate and its
/// vector-Jacobian product are derived from that prediction; implementations
/// may override them with closed forms as long as they stay consistent with
/// xhat_from_eps.
class ScoreModel {
 public:
  virtual ~ScoreModel() = default;

  virtual std::size_t dim() const = 0;
  virtual Vec predict_eps(ConstSpan x_t, Timestep ts) const = 0;

  virtual Vec predict_xhat0(ConstSpan x_t, Timestep ts) const {
    return xhat_from_eps(x_t, predict_eps(x_t, ts), ts.alpha_bar);
  }

  /// Jᵀ·cotangent with J = ∂x̂₀/∂x_t.
  virtual Vec xhat0_vjp(ConstSpan x_t, Timestep ts, ConstSpan cotangent) const = 0;
};

// ---- Gaussian mixture prior -------------------------------------------------

/// Diagonal-covariance Gaussian mixture over R^n.
struct GmmPrior {
  Vec weights;
  std::vector<Vec> means;
  std::vector<Vec> variances;

  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }

  void validate() const {
    require(!weights.empty(), "GmmPrior: need at least one component");
    require(means.size() == weights.size() && variances.size() == weights.size(),
            "GmmPrior: weights/means/variances length mismatch");
    const std::size_t n = dim();
    require(n >= 1, "GmmPrior: dimension must be >= 1");
    double total = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      require(weights[k] >= 0.0, "GmmPrior: negative weight");
      total += weights[k];
      require(means[k].size() == n && variances[k].size() == n, "GmmPrior: ragged component");
      for (double v : variances[k]) require(v > 0.0 && std::isfinite(v), "GmmPrior: variances must be > 0");
      require(all_finite(means[k]), "GmmPrior: non-finite mean");
    }
    require(std::abs(total - 1.0) <= 1e-12, "GmmPrior: weights must sum to 1");
  }

  /// Mixture mean E[x₀].
  Vec mean() const {
    Vec m(dim(), 0.0);
    for (std::size_t k = 0; k < components(); ++k) axpy(weights[k], means[k], m);
    return m;
  }
};

/// Random prior used by tests and the CLI: means ~ U(-spread, spread),
/// variances ~ U(var_lo, var_hi), weights ~ normalised U(0.5, 1.5).
inline GmmPrior random_gmm(std::size_t n, std::size_t components, std::uint64_t seed, double spread = 1.0,
                           double var_lo = 0.05, double var_hi = 0.3) {
  require(n >= 1 && components >= 1, "random_gmm: need n >= 1 and components >= 1");
  Rng rng(seed, 0x9a11);
  GmmPrior g;
  double total = 0.0;
  for (std::size_t k = 0; k < components; ++k) {
    g.weights.push_back(rng.uniform(0.5, 1.5));
    total += g.weights.back();
    Vec m(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = rng.uniform(-spread, spread);
      v[i] = rng.uniform(var_lo, var_hi);
    }
    g.means.push_back(std::move(m));
    g.variances.push_back(std::move(v));
  }
  for (double& w : g.weights) w /= total;
  return g;
}

namespace detail {

// Per-component quantities of the smoothed mixture
// q_t(x) = Σ_k w_k N(x; √ᾱ m_k, ᾱ C_k + (1-ᾱ) I).
struct SmoothedMixture {
  Vec log_joint;               // log w_k + log N_k(x)
  Vec resp;                    // responsibilities γ_k
  std::vector<Vec> smoothed;   // s_k = ᾱ v_k + (1-ᾱ)
  std::vector<Vec> centred;    // u_k = x - √ᾱ m_k
  double log_density = 0.0;    // log q_t(x)
};

inline SmoothedMixture smooth(const GmmPrior& prior, ConstSpan x, double alpha_bar) {
  const std::size_t K = prior.components();
  const std::size_t n = prior.dim();
  require(x.size() == n, "gmm: input dimension mismatch");
  const double sa = std::sqrt(alpha_bar);
  SmoothedMixture sm;
  sm.log_joint.resize(K);
  sm.resp.resize(K);
  sm.smoothed.assign(K, Vec(n));
  sm.centred.assign(K, Vec(n));
  constexpr double log2pi = 1.8378770664093454836;
  for (std::size_t k = 0; k < K; ++k) {
    double lp = std::log(prior.weights[k]);
    for (std::size_t i = 0; i < n; ++i) {
      const double s = alpha_bar * prior.variances[k][i] + (1.0 - alpha_bar);
      const double u = x[i] - sa * prior.means[k][i];
      sm.smoothed[k][i] = s;
      sm.centred[k][i] = u;
      lp += -0.5 * (log2pi + std::log(s) + u * u / s);
    }
    sm.log_joint[k] = lp;
  }
  sm.log_density = log_sum_exp(sm.log_joint);
  for (std::size_t k = 0; k < K; ++k) sm.resp[k] = std::exp(sm.log_joint[k] - sm.log_density);
  return sm;
}

}  // namespace detail

/// log q_t(x) of the mixture smoothed to noise level ᾱ.
inline double gmm_log_density(const GmmPrior& prior, ConstSpan x, double alpha_bar) {
  require(alpha_bar >= 0.0 && alpha_bar <= 1.0, "gmm_log_density: alpha_bar outside [0,1]");
  return detail::smooth(prior, x, alpha_bar).log_density;
}

/// ∇ₓ log q_t(x), computed analytically.
inline Vec gmm_score(const GmmPrior& prior, ConstSpan x, double alpha_bar) {
  require(alpha_bar >= 0.0 && alpha_bar <= 1.0, "gmm_score: alpha_bar outside [0,1]");
  const auto sm = detail::smooth(prior, x, alpha_bar);
  Vec g(x.size(), 0.0);
  for (std::size_t k = 0; k < prior.components(); ++k)
    for (std::size_t i = 0; i < x.size(); ++i) g[i] -= sm.resp[k] * sm.centred[k][i] / sm.smoothed[k][i];
  return g;
}

/// E[x₀ | x_t] in closed form: responsibility-weighted linear-Gaussian
/// component posteriors m_k + √ᾱ v_k (x - √ᾱ m_k) / s_k.
inline Vec gmm_posterior_mean(const GmmPrior& prior, ConstSpan x_t, double alpha_bar) {
  if (!(alpha_bar > 0.0)) throw NumericError("gmm_posterior_mean: alpha_bar = 0 carries no information");
  require(alpha_bar <= 1.0, "gmm_posterior_mean: alpha_bar > 1");
  if (alpha_bar == 1.0) return Vec(x_t.begin(), x_t.end());
  const auto sm = detail::smooth(prior, x_t, alpha_bar);
  const double sa = std::sqrt(alpha_bar);
  Vec out(x_t.size(), 0.0);
  for (std::size_t k = 0; k < prior.components(); ++k) {
    for (std::size_t i = 0; i < x_t.size(); ++i) {
      const double mu = prior.means[k][i] + sa * prior.variances[k][i] * sm.centred[k][i] / sm.smoothed[k][i];
      out[i] += sm.resp[k] * mu;
    }
  }
  return out;
}

/// Jᵀc for J = ∂E[x₀|x_t]/∂x_t. With component posterior means μ_k, gains
/// D_k = diag(√ᾱ v_k / s_k) and component log-density gradients g_k:
///   Jᵀc = Σ_k γ_k D_k c + Σ_k γ_k (μ_k·c)(g_k − ḡ),  ḡ = Σ_j γ_j g_j.
inline Vec gmm_posterior_mean_vjp(const GmmPrior& prior, ConstSpan x_t, double alpha_bar, ConstSpan cot) {
  if (!(alpha_bar > 0.0)) throw NumericError("gmm_posterior_mean_vjp: alpha_bar = 0");
  if (!all_finite(x_t) || !all_finite(cot)) throw NumericError("gmm_posterior_mean_vjp: non-finite input");
  if (alpha_bar == 1.0) return Vec(cot.begin(), cot.end());
  const auto sm = detail::smooth(prior, x_t, alpha_bar);
  const double sa = std::sqrt(alpha_bar);
  const std::size_t n = x_t.size();
  const std::size_t K = prior.components();

  Vec gbar(n, 0.0);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < n; ++i) gbar[i] -= sm.resp[k] * sm.centred[k][i] / sm.smoothed[k][i];

  Vec out(n, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const double gk = sm.resp[k];
    if (gk == 0.0) continue;
    double mu_dot_c = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double gain = sa * prior.variances[k][i] / sm.smoothed[k][i];
      const double mu = prior.means[k][i] + gain * sm.centred[k][i];
      mu_dot_c += mu * cot[i];
      out[i] += gk * gain * cot[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double g = -sm.centred[k][i] / sm.smoothed[k][i];
      out[i] += gk * mu_dot_c * (g - gbar[i]);
    }
  }
  return out;
}

/// Exact score model for a Gaussian-mixture data distribution.
class GmmScoreModel final : public ScoreModel {
 public:
  explicit GmmScoreModel(GmmPrior prior) : prior_(std::move(prior)) { prior_.validate(); }

  const GmmPrior& prior() const { return prior_; }
  std::size_t dim() const override { return prior_.dim(); }

  Vec predict_xhat0(ConstSpan x_t, Timestep ts) const override {
    return gmm_posterior_mean(prior_, x_t, ts.alpha_bar);
  }

  // At ᾱ = 1 the noise term carries zero weight in the plug-in formula, and
  // eps = -sqrt(1-ᾱ)·score vanishes.
  Vec predict_eps(ConstSpan x_t, Timestep ts) const override {
    if (ts.alpha_bar == 1.0) return Vec(x_t.size(), 0.0);
    return eps_from_xhat(x_t, gmm_posterior_mean(prior_, x_t, ts.alpha_bar), ts.alpha_bar);
  }

  Vec xhat0_vjp(ConstSpan x_t, Timestep ts, ConstSpan cot) const override {
    return gmm_posterior_mean_vjp(prior_, x_t, ts.alpha_bar, cot);
  }

 private:
  GmmPrior prior_;
};

}  // namespace cdim
