#pragma once

// Training for the mini denoiser: per-example noising, the diffusion loss
// backpropagated into the network, global-norm clipping and Adam with linear
// warmup. Also the finite-difference check of the analytic gradients.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <vector>

#include "difftx/diffusion.hpp"
#include "difftx/mini_denoiser.hpp"
#include "difftx/schedule.hpp"

namespace difftx {

struct TrainConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 500;
  double clip_norm = 10.0;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ParameterError("train: learning rate must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw ParameterError("train: Adam betas must be in [0, 1)");
    if (warmup_steps < 0) throw ParameterError("train: warmup must be >= 0");
    if (!(clip_norm > 0.0)) throw ParameterError("train: clip norm must be > 0");
  }

  double lr_at(std::int64_t step) const {
    if (warmup_steps == 0) return learning_rate;
    return learning_rate * std::min(1.0, static_cast<double>(step) / warmup_steps);
  }
};

template <typename Scalar>
struct AdamState {
  MiniParams<Scalar> m;
  MiniParams<Scalar> v;
  std::int64_t step = 0;

  static AdamState zeros(const MiniDenoiserConfig& cfg) {
    return AdamState{MiniParams<Scalar>::zeros(cfg), MiniParams<Scalar>::zeros(cfg), 0};
  }
};

struct TrainExample {
  TokenSeq x0;
  ConditioningSeq c;
};

/// A fully specified noised instance (t, x_t and dropout already decided).
struct NoisedExample {
  TokenSeq x0;
  TokenSeq x_t;
  int t = 1;
  ConditioningSeq c;
  bool conditioned = true;
};

/// Mean loss over `batch`; when `grads` is non-null, accumulates the gradient
/// of that mean into it.
template <typename Scalar>
LossBreakdown batch_loss(const MiniParams<Scalar>& params, const MiniDenoiserConfig& cfg,
                         std::span<const NoisedExample> batch, const NoiseSchedule& sched,
                         MiniParams<Scalar>* grads) {
  if (batch.empty()) throw ParameterError("train: empty batch");
  LossBreakdown total;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    auto cache = mini_forward_cached(params, cfg, ex.x_t, ex.t, ex.c, ex.conditioned);
    const RowMatrix logits = cache.logits.template cast<double>();
    LossAndGrad lg = diffusion_loss_grad(ex.x0, ex.x_t, ex.t, logits, sched);
    total += lg.loss;
    if (grads) {
      const nn::Mat<Scalar> dlogits = (lg.dlogits * inv_b).template cast<Scalar>();
      mini_backward(params, cfg, cache, dlogits, *grads);
    }
  }
  total.kl_term *= inv_b;
  total.ce_term *= inv_b;
  total.total *= inv_b;
  return total;
}

/// Draws t ~ U{1..T}, x_t ~ q(x_t | x0) and the conditioning-dropout decision.
inline NoisedExample noise_example(const TrainExample& ex, const NoiseSchedule& sched, double cond_dropout,
                                   Rng& rng) {
  NoisedExample out;
  out.x0 = ex.x0;
  out.t = 1 + std::min(static_cast<int>(uniform01(rng) * sched.steps()), sched.steps() - 1);
  out.x_t = sample_seq(forward_marginal_dist(ex.x0, out.t, sched), rng);
  out.c = ex.c;
  out.conditioned = ex.c.present && uniform01(rng) >= cond_dropout;
  return out;
}

template <typename Scalar>
double global_norm(const MiniParams<Scalar>& g) {
  double sq = 0.0;
  g.visit([&](const std::string&, const nn::Mat<Scalar>& m) { sq += m.template cast<double>().squaredNorm(); });
  return std::sqrt(sq);
}

template <typename Scalar>
void adam_update(MiniParams<Scalar>& params, const MiniParams<Scalar>& grads, AdamState<Scalar>& state,
                 const TrainConfig& tc, double lr, double grad_scale) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(state.step));
  std::vector<nn::Mat<Scalar>*> ps, gs, ms, vs;
  params.visit([&](const std::string&, nn::Mat<Scalar>& m) { ps.push_back(&m); });
  const_cast<MiniParams<Scalar>&>(grads).visit([&](const std::string&, nn::Mat<Scalar>& m) { gs.push_back(&m); });
  state.m.visit([&](const std::string&, nn::Mat<Scalar>& m) { ms.push_back(&m); });
  state.v.visit([&](const std::string&, nn::Mat<Scalar>& m) { vs.push_back(&m); });
  const Scalar b1 = static_cast<Scalar>(tc.beta1), b2 = static_cast<Scalar>(tc.beta2);
  const Scalar step_size = static_cast<Scalar>(lr / bc1);
  const Scalar inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
  const Scalar eps = static_cast<Scalar>(tc.adam_eps);
  const Scalar gscale = static_cast<Scalar>(grad_scale);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto g = (gs[i]->array() * gscale).eval();
    ms[i]->array() = b1 * ms[i]->array() + (Scalar(1) - b1) * g;
    vs[i]->array() = b2 * vs[i]->array() + (Scalar(1) - b2) * g.square();
    ps[i]->array() -= step_size * ms[i]->array() / (vs[i]->array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

struct StepResult {
  LossBreakdown loss;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
};

/// One optimizer update on `batch`. Throws TrainingError on a non-finite loss
/// or gradient, leaving params and optimizer state untouched.
template <typename Scalar>
StepResult train_step(MiniParams<Scalar>& params, const MiniDenoiserConfig& cfg,
                      std::span<const TrainExample> batch, const NoiseSchedule& sched,
                      AdamState<Scalar>& opt, const TrainConfig& tc, Rng& rng) {
  if (batch.empty()) throw ParameterError("train_step: empty batch");
  std::vector<NoisedExample> noised;
  noised.reserve(batch.size());
  for (const auto& ex : batch) noised.push_back(noise_example(ex, sched, cfg.cond_dropout, rng));

  MiniParams<Scalar> grads = MiniParams<Scalar>::zeros(cfg);
  StepResult res;
  res.loss = batch_loss<Scalar>(params, cfg, noised, sched, &grads);
  res.grad_norm = global_norm(grads);
  if (!std::isfinite(res.loss.total) || !std::isfinite(res.grad_norm)) {
    std::ostringstream msg;
    msg << "non-finite training loss at step " << opt.step + 1 << ": kl=" << res.loss.kl_term
        << " ce=" << res.loss.ce_term << " grad_norm=" << res.grad_norm;
    throw TrainingError(msg.str());
  }
  const double scale = res.grad_norm > tc.clip_norm ? tc.clip_norm / res.grad_norm : 1.0;
  res.learning_rate = tc.lr_at(opt.step + 1);
  adam_update(params, grads, opt, tc, res.learning_rate, scale);
  return res;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

/// Mean probe loss evaluated entirely in `Scalar`, written directly from the
/// distribution formulas (not through diffusion_loss_grad). Used as the
/// finite-difference side of grad_check.
template <typename Scalar>
Scalar reference_loss(const MiniParams<Scalar>& params, const MiniDenoiserConfig& cfg,
                      std::span<const NoisedExample> probe, const NoiseSchedule& sched) {
  using std::log;
  Scalar total = 0;
  const int k = cfg.num_classes;
  for (const auto& ex : probe) {
    const auto cache = mini_forward_cached(params, cfg, ex.x_t, ex.t, ex.c, ex.conditioned);
    for (int i = 0; i < ex.x0.size(); ++i) {
      std::vector<Scalar> xh(static_cast<std::size_t>(k));
      const Scalar m = cache.logits.row(i).maxCoeff();
      Scalar z = 0;
      for (int c = 0; c < k; ++c) z += xh[c] = std::exp(cache.logits(i, c) - m);
      for (auto& v : xh) v /= z;
      if (ex.t == 1) {
        total -= log(std::max(xh[ex.x0[i]], Scalar(kLogEps)));
        continue;
      }
      const Scalar alpha = sched.alpha(ex.t), abar = sched.alpha_bar(ex.t - 1);
      std::vector<Scalar> q(static_cast<std::size_t>(k)), pr(static_cast<std::size_t>(k));
      Scalar sq = 0, sp = 0;
      for (int c = 0; c < k; ++c) {
        const Scalar a = (c == ex.x_t[i] ? alpha : Scalar(0)) + (1 - alpha) / k;
        sq += q[c] = a * ((c == ex.x0[i] ? abar : Scalar(0)) + (1 - abar) / k);
        sp += pr[c] = a * (abar * xh[c] + (1 - abar) / k);
      }
      for (int c = 0; c < k; ++c) {
        const Scalar qc = q[c] / sq;
        if (qc > 0) total += qc * (log(qc) - log(std::max(pr[c] / sp, Scalar(kLogEps))));
      }
    }
  }
  return total / static_cast<Scalar>(probe.size());
}

/// Compares the analytic double-precision gradient of the mean probe loss
/// with central differences, |analytic - fd| / (|fd| + 1e-8), over every
/// `stride`-th parameter entry. The differenced loss is evaluated in long
/// double so that rounding in the loss does not swamp small gradients.
/// `corrupt` may tamper with the analytic gradient first.
inline GradCheckResult grad_check(const MiniParams<double>& params, const MiniDenoiserConfig& cfg,
                                  std::span<const NoisedExample> probe, const NoiseSchedule& sched,
                                  double h = 1e-4, std::size_t stride = 1,
                                  const std::function<void(MiniParams<double>&)>& corrupt = {}) {
  using Wide = long double;
  MiniParams<double> analytic = MiniParams<double>::zeros(cfg);
  batch_loss<double>(params, cfg, probe, sched, &analytic);
  if (corrupt) corrupt(analytic);

  MiniParams<Wide> work = params.template cast<Wide>();
  std::vector<std::pair<std::string, nn::Mat<Wide>*>> wt;
  std::vector<const nn::Mat<double>*> at;
  work.visit([&](const std::string& name, nn::Mat<Wide>& m) { wt.emplace_back(name, &m); });
  analytic.visit([&](const std::string&, const nn::Mat<double>& m) { at.push_back(&m); });

  GradCheckResult res;
  std::size_t counter = 0;
  for (std::size_t ti = 0; ti < wt.size(); ++ti) {
    nn::Mat<Wide>& m = *wt[ti].second;
    for (Eigen::Index e = 0; e < m.size(); ++e, ++counter) {
      if (counter % stride != 0) continue;
      const Wide orig = m.data()[e];
      m.data()[e] = orig + h;
      const Wide up = reference_loss<Wide>(work, cfg, probe, sched);
      m.data()[e] = orig - h;
      const Wide down = reference_loss<Wide>(work, cfg, probe, sched);
      m.data()[e] = orig;
      const double fd = static_cast<double>((up - down) / (2 * static_cast<Wide>(h)));
      const double rel = std::abs(at[ti]->data()[e] - fd) / (std::abs(fd) + 1e-8);
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = wt[ti].first + "[" + std::to_string(e) + "]";
      }
    }
  }
  return res;
}

}  // namespace difftx
