#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdim/constraint.hpp"
#include "cdim/core.hpp"
#include "cdim/measurement.hpp"
#include "cdim/schedule.hpp"
#include "cdim/score.hpp"

namespace cdim {

enum class StepSizeMode { dps_residual, instantaneous_grad, calibrated_expectation };

inline const char* to_string(StepSizeMode m) {
  switch (m) {
    case StepSizeMode::dps_residual: return "dps_residual";
    case StepSizeMode::instantaneous_grad: return "instantaneous_grad";
    case StepSizeMode::calibrated_expectation: return "calibrated_expectation";
  }
  return "?";
}

inline StepSizeMode step_mode_from_string(const std::string& s) {
  if (s == "dps_residual") return StepSizeMode::dps_residual;
  if (s == "instantaneous_grad") return StepSizeMode::instantaneous_grad;
  if (s == "calibrated_expectation") return StepSizeMode::calibrated_expectation;
  throw ParameterError("unknown step size mode '" + s + "'");
}

struct SolverConfig {
  int delta = 20;                 // grid stride; T' = ceil(T / delta)
  int K = 3;                      // projection steps per denoising step
  StepSizeMode step_mode = StepSizeMode::instantaneous_grad;
  double eta_scale = 1.0;
  double eta_max = -1.0;          // <0: 1e3 * eta_scale
  bool noiseless = false;         // exact final projection after the last step
  double noiseless_tol = 1e-5;
  int K_max_final = 500;
  double var_r = 0.0;             // early-stop threshold (L² solver only)
  Vec grad_profile;               // E‖∇x‖ per outer step (calibrated mode)

  double effective_eta_max() const { return eta_max < 0.0 ? 1e3 * eta_scale : eta_max; }

  void validate() const {
    require(K >= 0, "solver: K must be >= 0");
    require(eta_scale > 0.0, "solver: eta_scale must be > 0");
    require(noiseless_tol > 0.0, "solver: noiseless_tol must be > 0");
    require(K_max_final >= 0, "solver: K_max_final must be >= 0");
    require(var_r >= 0.0, "solver: var_r must be >= 0");
  }
};

// ---- step size ----------------------------------------------------------------

struct StepContext {
  double residual_norm = 0.0;     // ‖y − Ax̂₀‖
  double grad_norm = 0.0;         // ‖∇ₓ objective‖
  double profile_value = 0.0;     // E‖∇x‖ at this outer step
  double eta_scale = 1.0;
  double eta_max = 1e3;
};

struct StepSize {
  double eta = 0.0;
  bool clamped = false;
};

/// η = eta_scale / denominator, where the denominator is the residual norm,
/// the current gradient norm or the calibrated expected gradient norm.
/// Clamped to [0, eta_max]; a zero or non-finite denominator yields eta_max.
inline StepSize step_size(StepSizeMode mode, const StepContext& ctx) {
  double denom = 0.0;
  switch (mode) {
    case StepSizeMode::dps_residual: denom = ctx.residual_norm; break;
    case StepSizeMode::instantaneous_grad: denom = ctx.grad_norm; break;
    case StepSizeMode::calibrated_expectation: denom = ctx.profile_value; break;
  }
  if (!(denom > 0.0) || !std::isfinite(denom)) return {ctx.eta_max, true};
  const double eta = ctx.eta_scale / denom;
  if (eta > ctx.eta_max) return {ctx.eta_max, true};
  return {eta, false};
}

// ---- results --------------------------------------------------------------------

struct StepRecord {
  int t = 0;
  int t_next = 0;
  double objective_before = 0.0;  // at the first projection iterate (post-DDIM)
  double objective_after = 0.0;   // at the state handed to the next step
  double residual_inf_after = 0.0; // ‖y − Ax̂₀‖∞ at that same state
  std::vector<double> grad_norms; // ‖∇x‖ per inner step taken
  std::vector<double> etas;
  int inner_steps = 0;
  int eta_clamped = 0;
  bool early_stopped = false;
  double exit_variance = std::numeric_limits<double>::quiet_NaN();  // σ̂² that triggered the break
  double last_variance = std::numeric_limits<double>::quiet_NaN();  // last σ̂² computed in the loop
};

struct NoiselessProjection {
  Vec x0;
  int iterations = 0;
  double residual_inf = 0.0;
  bool converged = false;
};

struct SolveResult {
  Vec x0;
  std::vector<StepRecord> trajectory;
  long model_evals = 0;
  double wall_time = 0.0;  // seconds
  std::optional<NoiselessProjection> final_projection;
};

// ---- unconditional sampling ---------------------------------------------------

inline Vec initial_noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed, 0x1417);
  return rng.normal_vec(n);
}

/// Plain accelerated DDIM from x_T ~ N(0, I) (drawn from `seed`).
inline Vec ddim_sample(const ScoreModel& model, const NoiseSchedule& schedule, int delta, std::uint64_t seed) {
  const TimeGrid grid = make_time_grid(schedule, delta);
  Vec x = initial_noise(model.dim(), seed);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Timestep now = timestep(schedule, grid.steps[i]);
    const Timestep nxt = timestep(schedule, grid.next(i));
    const Vec xhat = model.predict_xhat0(x, now);
    x = ddim_step(x, xhat, now.alpha_bar, nxt.alpha_bar);
  }
  return x;
}

// ---- exact final projection -----------------------------------------------------

/// At t = 0 the Tweedie map is the identity, so ‖y − Ax̂₀‖² is a convex
/// quadratic in x̂₀. Minimised with conjugate-gradient least squares (every
/// update lies in the range of Aᵀ) until ‖y − Ax̂₀‖∞ <= tol or K_max steps.
/// Returns the best iterate seen.
inline NoiselessProjection project_noiseless_final(const LinearOperator& op, ConstSpan y, ConstSpan x_init,
                                                   double tol, int K_max) {
  require(tol > 0.0 && K_max >= 0, "project_noiseless_final: need tol > 0 and K_max >= 0");
  NoiselessProjection out;
  Vec x(x_init.begin(), x_init.end());
  Vec r = sub(y, op.apply(x));
  out.x0 = x;
  out.residual_inf = norm_inf(r);
  if (out.residual_inf <= tol) {
    out.converged = true;
    return out;
  }
  Vec s = op.adjoint(r);
  Vec p = s;
  double gamma = dot(s, s);
  for (int it = 1; it <= K_max && gamma > 0.0; ++it) {
    const Vec q = op.apply(p);
    const double qq = dot(q, q);
    if (!(qq > 0.0)) break;
    const double alpha = gamma / qq;
    axpy(alpha, p, x);
    r = sub(y, op.apply(x));  // recomputed rather than updated, keeps drift out
    const double rinf = norm_inf(r);
    out.iterations = it;
    if (rinf < out.residual_inf) {
      out.residual_inf = rinf;
      out.x0 = x;
    }
    if (rinf <= tol) break;
    s = op.adjoint(r);
    const double gamma_new = dot(s, s);
    const double beta = gamma_new / gamma;
    gamma = gamma_new;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = s[i] + beta * p[i];
  }
  out.converged = out.residual_inf <= tol;
  return out;
}

// ---- CDIM loops ---------------------------------------------------------------------

namespace detail {

inline double population_variance(ConstSpan r) {
  double mean = 0.0;
  for (double v : r) mean += v;
  mean /= static_cast<double>(r.size());
  double var = 0.0;
  for (double v : r) var += (v - mean) * (v - mean);
  return var / static_cast<double>(r.size());
}

[[noreturn]] inline void diverged(const char* where, const StepRecord& rec, int k, double eta,
                                   const char* cause = nullptr) {
  std::ostringstream os;
  os << where << ": non-finite state at t=" << rec.t << " -> " << rec.t_next << ", inner step " << k
     << " (eta=" << eta << ")";
  if (cause) os << ": " << cause;
  throw DivergenceError(os.str());
}

inline void record_after(StepRecord& rec, const ConstraintSpec& spec, ConstSpan y, ConstSpan axhat) {
  rec.objective_after = objective_value_and_grad_axhat(spec, y, axhat).value;
  rec.residual_inf_after = norm_inf(residual_additive(y, axhat));
}

// Shared body of both algorithms. early_stop_var set => L² variant with the
// variance guard checked before every projection update.
inline SolveResult run_cdim(const char* name, const ScoreModel& model, const NoiseSchedule& schedule,
                            const LinearOperator& op, ConstSpan y, const ConstraintSpec& spec,
                            const SolverConfig& cfg, std::uint64_t seed, std::optional<double> early_stop_var) {
  cfg.validate();
  spec.validate();
  require(op.n() == model.dim(), std::string(name) + ": operator input size must match the model dimension");
  require(op.d() == y.size(), std::string(name) + ": observation size must match operator output");
  require(spec.objective == Objective::l2 || y.size() >= 2,
          std::string(name) + ": distribution objectives need at least 2 observations");
  const TimeGrid grid = make_time_grid(schedule, cfg.delta);
  if (cfg.step_mode == StepSizeMode::calibrated_expectation)
    require(cfg.grad_profile.size() == grid.size(),
            std::string(name) + ": calibrated step sizes need one profile entry per outer step");

  const auto start = std::chrono::steady_clock::now();
  SolveResult res;
  Vec x = initial_noise(model.dim(), seed);
  const double eta_max = cfg.effective_eta_max();


  for (std::size_t i = 0; i < grid.size(); ++i) {
    StepRecord rec;
    rec.t = grid.steps[i];
    rec.t_next = grid.next(i);
    const Timestep now = timestep(schedule, rec.t);
    const Timestep nxt = timestep(schedule, rec.t_next);

    int k = -1;
    double last_eta = 0.0;
    try {
      // Unconditional DDIM step.
      const Vec xhat_now = model.predict_xhat0(x, now);
      ++res.model_evals;
      if (i > 0) record_after(res.trajectory.back(), spec, y, op.apply(xhat_now));
      x = ddim_step(x, xhat_now, now.alpha_bar, nxt.alpha_bar);
      if (!all_finite(x)) diverged(name, rec, -1, 0.0);

      // Projection on the Tweedie estimate at t_next.
      for (k = 0; k < cfg.K; ++k) {
        const Vec xhat = model.predict_xhat0(x, nxt);
        ++res.model_evals;
        const Vec axhat = op.apply(xhat);
        const Vec resid = residual_additive(y, axhat);
        if (early_stop_var) {
          const double var = population_variance(resid);
          rec.last_variance = var;
          if (var < *early_stop_var) {
            rec.early_stopped = true;
            rec.exit_variance = var;
            if (k == 0) rec.objective_before = dot(resid, resid) / static_cast<double>(resid.size());
            break;
          }
        }
        const ObjectiveEval ev = objective_value_and_grad(spec, y, axhat, op);
        if (k == 0) rec.objective_before = ev.value;
        const Vec gx = model.xhat0_vjp(x, nxt, ev.grad_xhat0);
        const double gnorm = norm2(gx);
        StepContext ctx;
        ctx.residual_norm = norm2(resid);
        ctx.grad_norm = gnorm;
        ctx.profile_value = cfg.step_mode == StepSizeMode::calibrated_expectation ? cfg.grad_profile[i] : 0.0;
        ctx.eta_scale = cfg.eta_scale;
        ctx.eta_max = eta_max;
        const StepSize st = step_size(cfg.step_mode, ctx);
        last_eta = st.eta;
        axpy(-st.eta, gx, x);
        if (!all_finite(x)) diverged(name, rec, k, st.eta);
        rec.grad_norms.push_back(gnorm);
        rec.etas.push_back(st.eta);
        rec.eta_clamped += st.clamped ? 1 : 0;
        ++rec.inner_steps;
      }
    } catch (const NumericError& e) {
      // The model or the objective rejected a state that went bad in between.
      diverged(name, rec, k, last_eta, e.what());
    }
    res.trajectory.push_back(std::move(rec));
  }

  // Last target time is t = 0 where x̂₀ = x exactly.
  res.x0 = x;
  if (!res.trajectory.empty()) record_after(res.trajectory.back(), spec, y, op.apply(res.x0));
  for (auto& r : res.trajectory)
    if (r.inner_steps == 0 && !r.early_stopped) r.objective_before = r.objective_after;

  if (cfg.noiseless) {
    auto proj = project_noiseless_final(op, y, res.x0, cfg.noiseless_tol, cfg.K_max_final);
    res.x0 = proj.x0;
    res.final_projection = std::move(proj);
  }
  res.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace detail

/// CDIM with a KL-type residual constraint (discrete, Gaussian or Pearson).
inline SolveResult cdim_solve_kl(const ScoreModel& model, const NoiseSchedule& schedule, const LinearOperator& op,
                                 ConstSpan y, const ConstraintSpec& spec, const SolverConfig& cfg,
                                 std::uint64_t seed) {
  require(spec.objective != Objective::l2, "cdim_solve_kl: objective must be a KL objective (use cdim_solve_l2)");
  return detail::run_cdim("cdim_solve_kl", model, schedule, op, y, spec, cfg, seed, std::nullopt);
}

/// CDIM with the (1/d)‖y − Ax̂₀‖² objective, breaking out of the projection
/// loop as soon as the residual variance drops below var_r.
inline SolveResult cdim_solve_l2(const ScoreModel& model, const NoiseSchedule& schedule, const LinearOperator& op,
                                 ConstSpan y, double var_r, const SolverConfig& cfg, std::uint64_t seed) {
  require(var_r >= 0.0, "cdim_solve_l2: var_r must be >= 0");
  // The variance of a single residual is always 0.
  require(var_r == 0.0 || y.size() >= 2, "cdim_solve_l2: early stopping needs at least 2 observations");
  ConstraintSpec spec;
  spec.objective = Objective::l2;
  return detail::run_cdim("cdim_solve_l2", model, schedule, op, y, spec, cfg, seed, var_r);
}

/// Convenience: route to the right algorithm from the spec's objective.
inline SolveResult cdim_solve(const ScoreModel& model, const NoiseSchedule& schedule, const LinearOperator& op,
                              ConstSpan y, const ConstraintSpec& spec, const SolverConfig& cfg, std::uint64_t seed) {
  if (spec.objective == Objective::l2) return cdim_solve_l2(model, schedule, op, y, cfg.var_r, cfg, seed);
  return cdim_solve_kl(model, schedule, op, y, spec, cfg, seed);
}

}  // namespace cdim
