#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "cdim/core.hpp"

namespace cdim {

/// Cumulative signal-retention factors alpha_bar[0..T]. alpha_bar[0] = 1 is the
/// clean signal; alpha_bar[T] is (numerically) pure noise.
class NoiseSchedule {
 public:
  NoiseSchedule(int steps, Vec alpha_bar) : steps_(steps), alpha_bar_(std::move(alpha_bar)) {
    require(steps_ >= 1, "schedule: T must be >= 1");
    require(alpha_bar_.size() == static_cast<std::size_t>(steps_) + 1,
            "schedule: alpha_bar must have T+1 entries");
    require(alpha_bar_[0] == 1.0, "schedule: alpha_bar[0] must equal 1");
    for (int t = 1; t <= steps_; ++t) {
      require(alpha_bar_[t] >= 0.0 && alpha_bar_[t] < alpha_bar_[t - 1],
              "schedule: alpha_bar must be strictly decreasing within [0,1]");
    }
    require(alpha_bar_[steps_] <= 1e-4, "schedule: alpha_bar[T] must be <= 1e-4");
  }

  int T() const { return steps_; }
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }
  const Vec& alpha_bars() const { return alpha_bar_; }

 private:
  int steps_;
  Vec alpha_bar_;
};

/// DDPM-convention schedule: betas linearly spaced over [beta_min, beta_max]
/// for s = 1..T, alpha_bar[t] = prod_{s<=t} (1 - beta_s).
inline NoiseSchedule make_linear_schedule(int T = 1000, double beta_min = 1e-4, double beta_max = 0.02) {
  require(T >= 1, "make_linear_schedule: T must be >= 1");
  require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0,
          "make_linear_schedule: need 0 < beta_min <= beta_max < 1");
  Vec ab(static_cast<std::size_t>(T) + 1);
  ab[0] = 1.0;
  for (int s = 1; s <= T; ++s) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(s - 1) / static_cast<double>(T - 1);
    const double beta = beta_min + (beta_max - beta_min) * frac;
    ab[s] = ab[s - 1] * (1.0 - beta);
  }
  return NoiseSchedule(T, std::move(ab));
}

/// Descending timesteps {T, T-delta, ...} down to the smallest positive entry.
/// Each step t moves the sampler to max(t - delta, 0).
struct TimeGrid {
  std::vector<int> steps;
  int delta = 1;

  std::size_t size() const { return steps.size(); }
  int t_prime() const { return static_cast<int>(steps.size()); }
  int next(std::size_t i) const { return std::max(steps[i] - delta, 0); }
};

inline TimeGrid make_time_grid(const NoiseSchedule& schedule, int delta) {
  require(delta >= 1 && delta <= schedule.T(), "make_time_grid: need 1 <= delta <= T");
  TimeGrid g;
  g.delta = delta;
  for (int t = schedule.T(); t >= 1; t -= delta) g.steps.push_back(t);
  return g;
}

}  // namespace cdim
