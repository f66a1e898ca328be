#pragma once

#include <cmath>
#include <optional>

#include "difftx/denoiser.hpp"
#include "difftx/toy_channel.hpp"

namespace difftx {

/// Exact per-position Bayes posterior of the aligned toy channel:
/// logit_k(i) = -|c_i - e_k|^2 / (2 sigma_c^2) + log prior(k).
/// Ignores x_t and t. An unconditional pass returns the log prior.
class OracleDenoiser final : public Denoiser {
 public:
  explicit OracleDenoiser(ChannelSpec channel, std::optional<Eigen::RowVectorXd> prior = std::nullopt)
      : channel_(std::move(channel)) {
    const int k = static_cast<int>(channel_.codebook.rows());
    log_prior_ = Eigen::RowVectorXd::Constant(k, -std::log(static_cast<double>(k)));
    if (prior) {
      if (prior->size() != k) throw ShapeError("OracleDenoiser: prior size != K");
      if ((prior->array() <= 0.0).any()) throw ParameterError("OracleDenoiser: prior must be positive");
      log_prior_ = (*prior / prior->sum()).array().log();
    }
  }

  int num_classes() const override { return static_cast<int>(channel_.codebook.rows()); }
  const ChannelSpec& channel() const noexcept { return channel_; }

  DenoiserOutput predict_x0(const TokenSeq& x_t, int /*t*/, const ConditioningSeq& c) const override {
    const int n = x_t.size();
    const int k = num_classes();
    DenoiserOutput out;
    out.logits.resize(n, k);
    if (!c.present) {
      out.logits.rowwise() = log_prior_;
      return out;
    }
    if (c.num_frames() != n)
      throw ShapeError("oracle denoiser needs one frame per position (M = " +
                       std::to_string(c.num_frames()) + ", N = " + std::to_string(n) + ")");
    if (c.dim() != channel_.dim) throw ShapeError("oracle denoiser: frame dim mismatch");
    // sigma_c = 0 would give infinite logits; a tiny floor keeps softmax exact one-hot.
    const double sigma = std::max(channel_.sigma_c, 1e-6);
    const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j)
        out.logits(i, j) =
            -(c.frames.row(i) - channel_.codebook.row(j)).squaredNorm() * inv_two_var + log_prior_(j);
    return out;
  }

 private:
  ChannelSpec channel_;
  Eigen::RowVectorXd log_prior_;
};

}  // namespace difftx
