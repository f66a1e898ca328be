#pragma once

// Multinomial diffusion over a K-symbol alphabet: forward kernels, the
// ground-truth posterior, the model-parameterized reverse step, and the
// training loss (KL for t >= 2, cross-entropy at t = 1).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "difftx/errors.hpp"
#include "difftx/schedule.hpp"

namespace difftx {

using Rng = std::mt19937_64;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Uniform double in [0, 1) from the top 53 bits; independent of the
/// standard library's distribution implementations.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// A realized sequence state x_t: N indices into a K-symbol alphabet.
struct TokenSeq {
  std::vector<int> tokens;
  int num_classes = 0;

  TokenSeq() = default;
  TokenSeq(std::vector<int> toks, int k) : tokens(std::move(toks)), num_classes(k) { validate(); }

  int size() const noexcept { return static_cast<int>(tokens.size()); }
  int operator[](int i) const { return tokens[static_cast<std::size_t>(i)]; }

  void validate() const {
    if (num_classes < 1) throw InvariantError("TokenSeq: K must be >= 1");
    for (int tok : tokens)
      if (tok < 0 || tok >= num_classes)
        throw InvariantError("TokenSeq: index " + std::to_string(tok) + " not in [0, " +
                             std::to_string(num_classes) + ")");
  }

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

/// N x K matrix of per-position categorical distributions.
struct CategoricalSeq {
  RowMatrix probs;

  CategoricalSeq() = default;
  explicit CategoricalSeq(RowMatrix p) : probs(std::move(p)) {}

  int size() const noexcept { return static_cast<int>(probs.rows()); }
  int num_classes() const noexcept { return static_cast<int>(probs.cols()); }

  bool is_normalized(double tol = 1e-9) const {
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      if ((probs.row(i).array() < 0.0).any()) return false;
      if (std::abs(probs.row(i).sum() - 1.0) > tol) return false;
    }
    return true;
  }

  static CategoricalSeq one_hot(const TokenSeq& x) {
    RowMatrix p = RowMatrix::Zero(x.size(), x.num_classes);
    for (int i = 0; i < x.size(); ++i) p(i, x[i]) = 1.0;
    return CategoricalSeq(std::move(p));
  }

  static CategoricalSeq uniform(int n, int k) {
    return CategoricalSeq(RowMatrix::Constant(n, k, 1.0 / k));
  }
};

struct LossBreakdown {
  double kl_term = 0.0;
  double ce_term = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    kl_term += o.kl_term;
    ce_term += o.ce_term;
    total += o.total;
    return *this;
  }
};

inline constexpr double kLogEps = 1e-12;

/// Row i = (1 - beta_i) onehot(x[i]) + beta_i / K, with a per-position beta.
/// Shared by the plain and the position-scaled forward step.
inline CategoricalSeq forward_kernel_dist(const TokenSeq& x_prev, std::span<const double> betas) {
  if (static_cast<int>(betas.size()) != x_prev.size())
    throw ShapeError("forward_kernel_dist: one beta per position required");
  const int k = x_prev.num_classes;
  RowMatrix p(x_prev.size(), k);
  for (int i = 0; i < x_prev.size(); ++i) {
    const double b = betas[static_cast<std::size_t>(i)];
    p.row(i).setConstant(b / k);
    p(i, x_prev[i]) += 1.0 - b;
  }
  return CategoricalSeq(std::move(p));
}

inline CategoricalSeq forward_step_dist(const TokenSeq& x_prev, int t, const NoiseSchedule& sched) {
  const std::vector<double> betas(static_cast<std::size_t>(x_prev.size()), sched.beta(t));
  return forward_kernel_dist(x_prev, betas);
}

/// q(x_t | x_0). Accepts t = 0 (identity) as an extension.
inline CategoricalSeq forward_marginal_dist(const TokenSeq& x0, int t, const NoiseSchedule& sched) {
  const double ab = sched.alpha_bar(t);
  const int k = x0.num_classes;
  RowMatrix p = RowMatrix::Constant(x0.size(), k, (1.0 - ab) / k);
  for (int i = 0; i < x0.size(); ++i) p(i, x0[i]) += ab;
  return CategoricalSeq(std::move(p));
}

inline int sample_categorical(const double* row, int k, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  int last_nonzero = 0;
  for (int c = 0; c < k; ++c) {
    if (row[c] > 0.0) last_nonzero = c;
    acc += row[c];
    if (u < acc) return c;
  }
  // u landed in the rounding gap at the top of the cdf.
  return last_nonzero;
}

/// Independent categorical draw per position.
inline TokenSeq sample_seq(const CategoricalSeq& dist, Rng& rng) {
  if (!dist.is_normalized())
    throw InvariantError("sample_seq: distribution rows are not normalized");
  const int k = dist.num_classes();
  std::vector<int> out(static_cast<std::size_t>(dist.size()));
  for (int i = 0; i < dist.size(); ++i)
    out[static_cast<std::size_t>(i)] = sample_categorical(dist.probs.row(i).data(), k, rng);
  return TokenSeq(std::move(out), k);
}

namespace detail {

inline void check_reverse_step(int t, const NoiseSchedule& sched, const char* who) {
  sched.check_step(t);
  if (t < 2)
    throw ParameterError(std::string(who) + ": requires t >= 2 (t = 1 is handled by x0_hat directly)");
}

/// [alpha_t onehot(x_t) + (1 - alpha_t)/K] * [abar_{t-1} x0_row + (1 - abar_{t-1})/K], normalized.
template <typename RowIn>
inline void posterior_row(int xt, const RowIn& x0_row, double alpha, double abar_prev, int k,
                          double* out) {
  const double a_off = (1.0 - alpha) / k;
  const double b_off = (1.0 - abar_prev) / k;
  double sum = 0.0;
  for (int c = 0; c < k; ++c) {
    const double a = (c == xt ? alpha : 0.0) + a_off;
    const double v = a * (abar_prev * x0_row(c) + b_off);
    out[c] = v;
    sum += v;
  }
  for (int c = 0; c < k; ++c) out[c] /= sum;
}

}  // namespace detail

/// Ground-truth posterior q(x_{t-1} | x_t, x_0), 2 <= t <= T.
inline CategoricalSeq posterior_dist(const TokenSeq& x_t, const TokenSeq& x0, int t,
                                     const NoiseSchedule& sched) {
  detail::check_reverse_step(t, sched, "posterior_dist");
  if (x_t.size() != x0.size() || x_t.num_classes != x0.num_classes)
    throw ShapeError("posterior_dist: x_t and x0 differ in shape");
  return CategoricalSeq([&] {
    const int k = x0.num_classes;
    RowMatrix p(x0.size(), k);
    Eigen::RowVectorXd onehot(k);
    for (int i = 0; i < x0.size(); ++i) {
      onehot.setZero();
      onehot(x0[i]) = 1.0;
      detail::posterior_row(x_t[i], onehot, sched.alpha(t), sched.alpha_bar(t - 1), k,
                            p.row(i).data());
    }
    return p;
  }());
}

/// Model reverse step p(x_{t-1} | x_t): the posterior with x0_hat rows
/// substituted for onehot(x0).
inline CategoricalSeq reverse_dist(const TokenSeq& x_t, const CategoricalSeq& x0_hat, int t,
                                   const NoiseSchedule& sched) {
  detail::check_reverse_step(t, sched, "reverse_dist");
  if (x_t.size() != x0_hat.size() || x_t.num_classes != x0_hat.num_classes())
    throw ShapeError("reverse_dist: x_t and x0_hat differ in shape");
  const int k = x_t.num_classes;
  RowMatrix p(x_t.size(), k);
  for (int i = 0; i < x_t.size(); ++i)
    detail::posterior_row(x_t[i], x0_hat.probs.row(i), sched.alpha(t), sched.alpha_bar(t - 1), k,
                          p.row(i).data());
  return CategoricalSeq(std::move(p));
}

/// Sum over positions of KL(q_i || p_i), with ln p clamped at 1e-12.
inline double kl_categorical(const CategoricalSeq& q, const CategoricalSeq& p) {
  if (q.probs.rows() != p.probs.rows() || q.probs.cols() != p.probs.cols())
    throw ShapeError("kl_categorical: shape mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < q.probs.rows(); ++i)
    for (Eigen::Index c = 0; c < q.probs.cols(); ++c) {
      const double qv = q.probs(i, c);
      if (qv > 0.0) kl += qv * (std::log(qv) - std::log(std::max(p.probs(i, c), kLogEps)));
    }
  return kl;
}

inline LossBreakdown diffusion_loss(const TokenSeq& x0, const TokenSeq& x_t, int t,
                                    const CategoricalSeq& x0_hat, const NoiseSchedule& sched) {
  sched.check_step(t);
  if (x0.size() != x0_hat.size() || x0.num_classes != x0_hat.num_classes())
    throw ShapeError("diffusion_loss: x0 and x0_hat differ in shape");
  LossBreakdown out;
  if (t == 1) {
    for (int i = 0; i < x0.size(); ++i)
      out.ce_term -= std::log(std::max(x0_hat.probs(i, x0[i]), kLogEps));
  } else {
    out.kl_term = kl_categorical(posterior_dist(x_t, x0, t, sched), reverse_dist(x_t, x0_hat, t, sched));
  }
  out.total = out.kl_term + out.ce_term;
  return out;
}

/// Row-wise softmax in double precision.
template <typename Derived>
inline CategoricalSeq softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  RowMatrix p = logits.template cast<double>();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return CategoricalSeq(std::move(p));
}

struct LossAndGrad {
  LossBreakdown loss;
  RowMatrix dlogits;  // dL/dlogits, N x K
};

/// diffusion_loss with x0_hat = softmax(logits), plus its gradient w.r.t. the
/// logits. The t >= 2 branch differentiates through the normalization of the
/// reverse distribution.
inline LossAndGrad diffusion_loss_grad(const TokenSeq& x0, const TokenSeq& x_t, int t,
                                       const RowMatrix& logits, const NoiseSchedule& sched) {
  const CategoricalSeq x0_hat = softmax_rows(logits);
  LossAndGrad out;
  out.loss = diffusion_loss(x0, x_t, t, x0_hat, sched);
  const int n = x0.size();
  const int k = x0.num_classes;
  out.dlogits.resize(n, k);
  if (t == 1) {
    for (int i = 0; i < n; ++i) {
      out.dlogits.row(i) = x0_hat.probs.row(i);
      if (x0_hat.probs(i, x0[i]) >= kLogEps) out.dlogits(i, x0[i]) -= 1.0;
    }
    return out;
  }
  const double alpha = sched.alpha(t);
  const double abar_prev = sched.alpha_bar(t - 1);
  const double a_off = (1.0 - alpha) / k;
  const double b_off = (1.0 - abar_prev) / k;
  const CategoricalSeq q = posterior_dist(x_t, x0, t, sched);
  Eigen::RowVectorXd a(k), u(k), g(k);
  for (int i = 0; i < n; ++i) {
    const auto xh = x0_hat.probs.row(i);
    for (int c = 0; c < k; ++c) {
      a(c) = (c == x_t[i] ? alpha : 0.0) + a_off;
      u(c) = a(c) * (abar_prev * xh(c) + b_off);
    }
    const double s = u.sum();
    // dL/du_m = -q_m/u_m + (sum of q over unclamped entries)/S
    double q_live = 0.0;
    for (int c = 0; c < k; ++c)
      if (u(c) / s >= kLogEps) q_live += q.probs(i, c);
    for (int c = 0; c < k; ++c) {
      const double du = (u(c) / s >= kLogEps ? -q.probs(i, c) / u(c) : 0.0) + q_live / s;
      g(c) = du * a(c) * abar_prev;
    }
    const double dot = g.dot(xh);
    out.dlogits.row(i) = xh.array() * (g.array() - dot);
  }
  return out;
}

}  // namespace difftx
