#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "difftx/errors.hpp"

namespace difftx {

/// Per-timestep noise tables. States run x_0..x_T; beta/alpha are indexed
/// t in [1, T] and alpha_bar in [0, T] with alpha_bar(0) == 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  /// Builds from raw betas (beta[0] is beta_1). Each beta must lie in (0, 1].
  explicit NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
    if (beta_.empty()) throw ParameterError("schedule needs at least one step");
    alpha_.resize(beta_.size());
    alpha_bar_.resize(beta_.size() + 1);
    alpha_bar_[0] = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) {
      if (!(beta_[i] > 0.0 && beta_[i] <= 1.0))
        throw ParameterError("beta out of (0, 1] at t=" + std::to_string(i + 1));
      alpha_[i] = 1.0 - beta_[i];
      alpha_bar_[i + 1] = alpha_bar_[i] * alpha_[i];
    }
  }

  int steps() const noexcept { return static_cast<int>(beta_.size()); }

  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return alpha_[index(t)]; }
  double alpha_bar(int t) const {
    if (t < 0 || t > steps())
      throw ParameterError("alpha_bar index " + std::to_string(t) + " outside [0, " +
                           std::to_string(steps()) + "]");
    return alpha_bar_[static_cast<std::size_t>(t)];
  }

  void check_step(int t) const { (void)index(t); }

 private:
  std::size_t index(int t) const {
    if (t < 1 || t > steps())
      throw ParameterError("timestep " + std::to_string(t) + " outside [1, " +
                           std::to_string(steps()) + "]");
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

inline constexpr double kMaxBeta = 0.999;

/// Cosine schedule: alpha_bar(t) = g(t)/g(0) with
/// g(t) = cos^2(((t/T + s)/(1 + s)) * pi/2). Betas come from consecutive
/// ratios, clipped at 0.999; alpha_bar is then rebuilt from the clipped betas.
inline NoiseSchedule cosine_schedule(int steps, double s = 0.008) {
  if (steps < 1) throw ParameterError("cosine_schedule: T must be >= 1");
  if (!(s > 0.0 && s < 1.0)) throw ParameterError("cosine_schedule: s must be in (0, 1)");
  auto g = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / steps + s) / (1.0 + s) *
                              std::numbers::pi / 2.0);
    return c * c;
  };
  const double g0 = g(0);
  std::vector<double> betas(static_cast<std::size_t>(steps));
  double prev = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double cur = g(t) / g0;
    const double b = 1.0 - cur / prev;
    betas[static_cast<std::size_t>(t - 1)] = std::min(b, kMaxBeta);
    prev = cur;
  }
  return NoiseSchedule(std::move(betas));
}

/// Position/jump scaling used by sequentially progressive re-noising:
/// f(i, j) = sigmoid((i - j*N/J + offset) / slope_divisor), offset = 2J by default.
struct ProgressiveConfig {
  int length = 400;
  int jumps = 10;
  double slope_divisor = 8.0;
  double offset = 20.0;

  static ProgressiveConfig make(int length, int jumps, double slope_divisor = 8.0) {
    ProgressiveConfig cfg{length, jumps, slope_divisor, 2.0 * jumps};
    cfg.validate();
    return cfg;
  }

  void validate() const {
    if (length < 1) throw ParameterError("ProgressiveConfig: N must be >= 1");
    if (jumps < 1) throw ParameterError("ProgressiveConfig: J must be >= 1");
    if (!(slope_divisor > 0.0)) throw ParameterError("ProgressiveConfig: slope divisor must be > 0");
  }
};

inline double progressive_factor(int i, int j, const ProgressiveConfig& cfg) {
  if (i < 0 || i >= cfg.length) throw ParameterError("progressive_factor: position out of range");
  if (j < 0 || j >= cfg.jumps) throw ParameterError("progressive_factor: jump out of range");
  const double z = (static_cast<double>(i) -
                    static_cast<double>(j) * cfg.length / cfg.jumps + cfg.offset) /
                   cfg.slope_divisor;
  return 1.0 / (1.0 + std::exp(-z));
}

inline double scaled_beta(const NoiseSchedule& sched, int t, int i, int j,
                          const ProgressiveConfig& cfg) {
  return sched.beta(t) * progressive_factor(i, j, cfg);
}

}  // namespace difftx
