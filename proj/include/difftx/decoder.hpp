#pragma once

// Inference: ancestral decoding from uniform noise, classifier-free guidance
// on the denoiser logits, RePaint-style resampling walks, and position-scaled
// ("sequentially progressive") re-noising on the forward legs of the walk.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "difftx/denoiser.hpp"
#include "difftx/diffusion.hpp"
#include "difftx/errors.hpp"
#include "difftx/schedule.hpp"

namespace difftx {

enum class Strategy { kBasic, kGuided, kResample, kResampleProgressive };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kBasic: return "basic";
    case Strategy::kGuided: return "guided";
    case Strategy::kResample: return "resample";
    case Strategy::kResampleProgressive: return "resample_progressive";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "basic") return Strategy::kBasic;
  if (s == "guided") return Strategy::kGuided;
  if (s == "resample") return Strategy::kResample;
  if (s == "resample_progressive") return Strategy::kResampleProgressive;
  throw ParameterError("unknown decoding strategy '" + std::string(s) + "'");
}

/// How the jump index j fed to the progressive scale is counted.
enum class JumpIndexing {
  kPerAnchor,  // excursion counter restarting at each anchor: 0..J-2
  kGlobal,     // running excursion counter over the whole walk, modulo J
};

struct DecodeConfig {
  int steps = 200;
  int length = 400;
  double guidance = 1.5;
  Strategy strategy = Strategy::kResampleProgressive;
  int jump_length = 10;
  int jumps = 10;
  std::uint64_t seed = 0;
  JumpIndexing jump_indexing = JumpIndexing::kPerAnchor;
  double slope_divisor = 8.0;
  bool capture_trace = true;

  bool guided() const noexcept { return strategy != Strategy::kBasic; }
  bool resampling() const noexcept {
    return strategy == Strategy::kResample || strategy == Strategy::kResampleProgressive;
  }

  void validate() const {
    if (steps < 1) throw ParameterError("decode: T must be >= 1");
    if (length < 1) throw ParameterError("decode: N must be >= 1");
    // w >= 1 is the useful range; w in [0, 1) is allowed so the w = 0
    // (unconditional) reduction can be exercised.
    if (!std::isfinite(guidance) || guidance < 0.0) throw ParameterError("decode: w must be finite and >= 0");
    if (resampling()) {
      if (jump_length < 1) throw ParameterError("decode: L must be >= 1");
      if (jumps < 1) throw ParameterError("decode: J must be >= 1");
      if (steps % jump_length != 0) throw ParameterError("decode: T must be divisible by L when resampling");
    }
    if (!(slope_divisor > 0.0)) throw ParameterError("decode: slope divisor must be > 0");
  }
};

enum class Direction { kReverse, kForward };

inline std::string_view to_string(Direction d) { return d == Direction::kReverse ? "reverse" : "forward"; }

/// One move of the time walk. A reverse move goes t -> t-1 through
/// p(x_{t-1} | x_t); a forward move goes t -> t+1 through q(x_{t+1} | x_t).
/// `jump` is the excursion index of a forward move (-1 on reverse moves).
struct WalkStep {
  Direction direction;
  int t;
  int jump = -1;

  int target() const noexcept { return direction == Direction::kReverse ? t - 1 : t + 1; }
  friend bool operator==(const WalkStep&, const WalkStep&) = default;
};

/// RePaint-style walk from T to 0. Anchors sit every L reverse steps at
/// t = T - L, T - 2L, ..., L (T/L - 1 of them). On reaching an anchor the walk
/// makes J - 1 excursions of L forward steps followed by L reverse steps.
/// J = 1 gives the plain reverse walk.
inline std::vector<WalkStep> repaint_schedule(int steps, int jump_length, int jumps,
                                              JumpIndexing indexing = JumpIndexing::kPerAnchor) {
  if (steps < 1) throw ParameterError("repaint_schedule: T must be >= 1");
  if (jump_length < 1 || steps % jump_length != 0)
    throw ParameterError("repaint_schedule: L must divide T");
  if (jumps < 1) throw ParameterError("repaint_schedule: J must be >= 1");
  std::vector<WalkStep> walk;
  int global_excursion = 0;
  for (int t = steps; t > 0; --t) {
    walk.push_back({Direction::kReverse, t});
    const int now = t - 1;
    const bool anchor = now > 0 && now % jump_length == 0 && now < steps;
    if (!anchor) continue;
    for (int e = 0; e < jumps - 1; ++e, ++global_excursion) {
      const int j = indexing == JumpIndexing::kPerAnchor ? e : global_excursion % jumps;
      for (int s = 0; s < jump_length; ++s) walk.push_back({Direction::kForward, now + s, j});
      for (int s = 0; s < jump_length; ++s) walk.push_back({Direction::kReverse, now + jump_length - s});
    }
  }
  return walk;
}

/// w * cond + (1 - w) * uncond on logits; softmax is left to the caller.
inline DenoiserOutput guide_logits(const DenoiserOutput& cond, const DenoiserOutput& uncond, double w) {
  if (cond.logits.rows() != uncond.logits.rows() || cond.logits.cols() != uncond.logits.cols())
    throw ShapeError("guide_logits: shape mismatch");
  return DenoiserOutput{w * cond.logits + (1.0 - w) * uncond.logits};
}

struct TraceRecord {
  int t;
  Direction direction;
  TokenSeq state;
};

/// Snapshots of the walk. The first record is the initial x_T (tagged
/// reverse); each later record is the state produced by one move.
struct DecodeTrace {
  std::vector<TraceRecord> steps;
};

struct DecodeResult {
  TokenSeq tokens;
  DecodeTrace trace;
};

/// Forward move t -> t+1. With `progressive` set, position i uses
/// beta_{t+1} * f(i, j).
inline TokenSeq forward_move(const TokenSeq& x, int t, const NoiseSchedule& sched,
                             const std::optional<std::pair<ProgressiveConfig, int>>& progressive, Rng& rng) {
  std::vector<double> betas(static_cast<std::size_t>(x.size()), sched.beta(t + 1));
  if (progressive) {
    const auto& [pcfg, j] = *progressive;
    for (int i = 0; i < x.size(); ++i) betas[static_cast<std::size_t>(i)] *= progressive_factor(i, j, pcfg);
  }
  return sample_seq(forward_kernel_dist(x, betas), rng);
}

/// x0_hat logits for one reverse step: one conditional pass, or a
/// conditional and an unconditional pass combined with weight w.
inline DenoiserOutput guided_prediction(const Denoiser& denoiser, const TokenSeq& x_t, int t,
                                        const ConditioningSeq& c, const DecodeConfig& cfg) {
  DenoiserOutput cond = denoiser.predict_x0(x_t, t, c);
  if (!cfg.guided()) return cond;
  const DenoiserOutput uncond = denoiser.predict_x0(x_t, t, c.dropped());
  return guide_logits(cond, uncond, cfg.guidance);
}

inline DecodeResult decode(const Denoiser& denoiser, const ConditioningSeq& c, const DecodeConfig& cfg,
                           const NoiseSchedule& sched) {
  cfg.validate();
  if (sched.steps() != cfg.steps)
    throw ParameterError("decode: schedule has " + std::to_string(sched.steps()) + " steps, config asks for " +
                         std::to_string(cfg.steps));
  const int k = denoiser.num_classes();
  Rng rng(cfg.seed);

  DecodeResult res;
  res.tokens = sample_seq(CategoricalSeq::uniform(cfg.length, k), rng);
  if (cfg.capture_trace) res.trace.steps.push_back({cfg.steps, Direction::kReverse, res.tokens});

  const std::vector<WalkStep> walk = cfg.resampling()
                                         ? repaint_schedule(cfg.steps, cfg.jump_length, cfg.jumps, cfg.jump_indexing)
                                         : repaint_schedule(cfg.steps, 1, 1);
  std::optional<ProgressiveConfig> pcfg;
  if (cfg.strategy == Strategy::kResampleProgressive) {
    pcfg = ProgressiveConfig{cfg.length, cfg.jumps, cfg.slope_divisor, 2.0 * cfg.jumps};
    pcfg->validate();
  }

  for (const WalkStep& step : walk) {
    if (step.direction == Direction::kReverse) {
      const DenoiserOutput logits = guided_prediction(denoiser, res.tokens, step.t, c, cfg);
      if (logits.logits.rows() != cfg.length || logits.logits.cols() != k)
        throw ShapeError("decode: denoiser returned wrong logits shape");
      const CategoricalSeq x0_hat = logits.probs();
      res.tokens = step.t == 1 ? sample_seq(x0_hat, rng) : sample_seq(reverse_dist(res.tokens, x0_hat, step.t, sched), rng);
    } else {
      std::optional<std::pair<ProgressiveConfig, int>> prog;
      if (pcfg) prog.emplace(*pcfg, std::min(step.jump, cfg.jumps - 1));
      res.tokens = forward_move(res.tokens, step.t, sched, prog, rng);
    }
    if (cfg.capture_trace) res.trace.steps.push_back({step.target(), step.direction, res.tokens});
  }
  return res;
}

/// Decodes each conditioning sequence with seed cfg.seed ^ index, spread over
/// `threads` workers. Results are in input order and independent of `threads`.
inline std::vector<DecodeResult> decode_many(const Denoiser& denoiser, const std::vector<ConditioningSeq>& conds,
                                             const DecodeConfig& cfg, const NoiseSchedule& sched,
                                             unsigned threads = 1, std::uint64_t first_index = 0) {
  std::vector<DecodeResult> out(conds.size());
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(conds.size(), 1))));
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](unsigned worker) {
    try {
      for (std::size_t i = worker; i < conds.size(); i += threads) {
        DecodeConfig local = cfg;
        local.seed = cfg.seed ^ (first_index + i);
        out[i] = decode(denoiser, conds[i], local, sched);
      }
    } catch (...) {
      errors[worker] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace difftx
