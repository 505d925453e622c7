#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "cdim/constraint.hpp"
#include "cdim/core.hpp"
#include "cdim/measurement.hpp"
#include "cdim/solver.hpp"

namespace cdim {

/// What a profile was calibrated for. Profiles only transfer between runs
/// that agree on all four fields.
struct ProfileFingerprint {
  std::string op;
  std::string objective;
  int t_prime = 0;
  int K = 0;

  bool operator==(const ProfileFingerprint&) const = default;

  std::string describe() const {
    return "operator=" + op + " objective=" + objective + " t_prime=" + std::to_string(t_prime) +
           " K=" + std::to_string(K);
  }
};

inline ProfileFingerprint fingerprint_for(const LinearOperator& op, const ConstraintSpec& spec,
                                          const NoiseSchedule& schedule, const SolverConfig& cfg) {
  return {op.name(), to_string(spec.objective), make_time_grid(schedule, cfg.delta).t_prime(), cfg.K};
}

struct StepSizeProfile {
  ProfileFingerprint fingerprint;
  std::vector<int> grid;        // outer timesteps, descending
  Vec mean_grad_norm;           // per outer step, > 0
  Vec std_grad_norm;            // pooled over samples and inner steps
  std::vector<long> counts;     // number of gradient norms averaged
  int n_calibration_samples = 0;
  // per_sample[j][i]: sample j's mean norm at outer step i (NaN when absent).
  // Diagnostic only; not persisted.
  std::vector<Vec> per_sample;
};

struct CalibrationError : NumericError {
  using NumericError::NumericError;
};
struct ProfileMismatch : Error {
  using Error::Error;
};

/// Runs the full CDIM loop on every calibration signal with per-step gradient
/// normalisation, and averages ‖∇x‖ per outer step over samples and inner
/// iterations. Zero gradients are left out of the average; an outer step with
/// no recorded gradient borrows the value of its nearest recorded neighbour.
inline StepSizeProfile calibrate(const ScoreModel& model, const NoiseSchedule& schedule, const LinearOperator& op,
                                 const ConstraintSpec& spec, const NoiseModel& noise, const SolverConfig& cfg,
                                 const std::vector<Vec>& calibration_set, std::uint64_t seed) {
  require(!calibration_set.empty(), "calibrate: calibration set is empty");
  require(cfg.K >= 1, "calibrate: need K >= 1 to observe any gradients");
  SolverConfig run_cfg = cfg;
  run_cfg.step_mode = StepSizeMode::instantaneous_grad;
  run_cfg.noiseless = false;
  run_cfg.grad_profile.clear();

  const TimeGrid grid = make_time_grid(schedule, cfg.delta);
  const std::size_t steps = grid.size();
  Vec sum(steps, 0.0), sumsq(steps, 0.0);
  std::vector<long> count(steps, 0);
  StepSizeProfile prof;
  prof.fingerprint = fingerprint_for(op, spec, schedule, cfg);
  prof.grid = grid.steps;
  prof.n_calibration_samples = static_cast<int>(calibration_set.size());

  for (std::size_t j = 0; j < calibration_set.size(); ++j) {
    const std::uint64_t sj = splitmix64(seed + 0x51 * (j + 1));
    const Vec y = observe(op, calibration_set[j], noise, sj);
    SolveResult res;
    try {
      res = cdim_solve(model, schedule, op, y, spec, run_cfg, sj);
    } catch (const DivergenceError& e) {
      throw CalibrationError("calibrate: sample " + std::to_string(j) + " diverged: " + e.what());
    }
    Vec mine(steps, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < steps; ++i) {
      double s = 0.0;
      long c = 0;
      for (double g : res.trajectory[i].grad_norms) {
        if (!std::isfinite(g))
          throw CalibrationError("calibrate: non-finite gradient in sample " + std::to_string(j) + " at t=" +
                                 std::to_string(grid.steps[i]));
        if (g == 0.0) continue;
        s += g;
        sum[i] += g;
        sumsq[i] += g * g;
        ++c;
      }
      count[i] += c;
      if (c > 0) mine[i] = s / static_cast<double>(c);
    }
    prof.per_sample.push_back(std::move(mine));
  }

  prof.mean_grad_norm.assign(steps, 0.0);
  prof.std_grad_norm.assign(steps, 0.0);
  prof.counts = count;
  for (std::size_t i = 0; i < steps; ++i) {
    if (count[i] == 0) continue;
    const double c = static_cast<double>(count[i]);
    prof.mean_grad_norm[i] = sum[i] / c;
    prof.std_grad_norm[i] = std::sqrt(std::max(0.0, sumsq[i] / c - prof.mean_grad_norm[i] * prof.mean_grad_norm[i]));
  }
  for (std::size_t i = 0; i < steps; ++i) {
    if (count[i] > 0) continue;
    for (std::size_t off = 1; off < steps; ++off) {
      if (i >= off && count[i - off] > 0) {
        prof.mean_grad_norm[i] = prof.mean_grad_norm[i - off];
        break;
      }
      if (i + off < steps && count[i + off] > 0) {
        prof.mean_grad_norm[i] = prof.mean_grad_norm[i + off];
        break;
      }
    }
    if (!(prof.mean_grad_norm[i] > 0.0))
      throw CalibrationError("calibrate: no non-zero gradients were recorded at any step");
  }
  return prof;
}

/// Refuses profiles calibrated for a different task/objective/T'/K.
inline void check_fingerprint(const StepSizeProfile& p, const ProfileFingerprint& expected) {
  if (!(p.fingerprint == expected))
    throw ProfileMismatch("step-size profile mismatch: profile has [" + p.fingerprint.describe() +
                          "] but the run needs [" + expected.describe() + "]");
}

// Profile files are CSV with a commented, versioned header:
//   # cdim step-size profile v1
//   # operator=... / objective=... / t_prime=... / K=... / samples=...
//   t,mean_grad_norm,std_grad_norm,n
inline void save_profile(const StepSizeProfile& p, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os << "# cdim step-size profile v1\n";
  os << "# operator=" << p.fingerprint.op << "\n";
  os << "# objective=" << p.fingerprint.objective << "\n";
  os << "# t_prime=" << p.fingerprint.t_prime << "\n";
  os << "# K=" << p.fingerprint.K << "\n";
  os << "# samples=" << p.n_calibration_samples << "\n";
  os << "t,mean_grad_norm,std_grad_norm,n\n";
  char buf[128];
  for (std::size_t i = 0; i < p.grid.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%ld\n", p.grid[i], p.mean_grad_norm[i], p.std_grad_norm[i],
                  p.counts[i]);
    os << buf;
  }
  if (!os) throw FormatError("write failed: " + path);
}

inline StepSizeProfile load_profile(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open profile: " + path);
  StepSizeProfile p;
  std::string line;
  if (!std::getline(is, line) || line != "# cdim step-size profile v1")
    throw FormatError("not a v1 step-size profile: " + path);
  auto header_value = [&](const std::string& key) {
    if (!std::getline(is, line) || line.rfind("# " + key + "=", 0) != 0)
      throw FormatError("profile header missing '" + key + "': " + path);
    return line.substr(key.size() + 3);
  };
  try {
    p.fingerprint.op = header_value("operator");
    p.fingerprint.objective = header_value("objective");
    p.fingerprint.t_prime = std::stoi(header_value("t_prime"));
    p.fingerprint.K = std::stoi(header_value("K"));
    p.n_calibration_samples = std::stoi(header_value("samples"));
  } catch (const std::logic_error&) {
    throw FormatError("malformed profile header: " + path);
  }
  if (!std::getline(is, line) || line != "t,mean_grad_norm,std_grad_norm,n")
    throw FormatError("profile column header missing: " + path);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    int t = 0;
    double mean = 0.0, sd = 0.0;
    long n = 0;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%ld", &t, &mean, &sd, &n) != 4)
      throw FormatError("malformed profile row '" + line + "': " + path);
    if (!(mean > 0.0) || !std::isfinite(mean)) throw FormatError("profile entries must be finite and > 0: " + path);
    p.grid.push_back(t);
    p.mean_grad_norm.push_back(mean);
    p.std_grad_norm.push_back(sd);
    p.counts.push_back(n);
  }
  if (static_cast<int>(p.grid.size()) != p.fingerprint.t_prime)
    throw FormatError("profile row count does not match t_prime: " + path);
  return p;
}

/// Load and verify against the run that is about to use it.
inline StepSizeProfile load_profile_for(const std::string& path, const ProfileFingerprint& expected) {
  StepSizeProfile p = load_profile(path);
  check_fingerprint(p, expected);
  return p;
}

}  // namespace cdim
