#pragma once

// The x0 predictor contract shared by the Bayes oracle and the trainable
// mini network.

#include <Eigen/Dense>

#include "difftx/diffusion.hpp"
#include "difftx/errors.hpp"

namespace difftx {

/// Feature frames c (M x d). `present == false` marks an unconditional pass;
/// frames are then ignored.
struct ConditioningSeq {
  RowMatrix frames;
  bool present = true;

  int num_frames() const noexcept { return static_cast<int>(frames.rows()); }
  int dim() const noexcept { return static_cast<int>(frames.cols()); }

  static ConditioningSeq unconditional(int dim = 0) {
    ConditioningSeq c;
    c.frames.resize(0, dim);
    c.present = false;
    return c;
  }

  ConditioningSeq dropped() const {
    ConditioningSeq c = *this;
    c.present = false;
    return c;
  }
};

/// Pre-softmax scores for x0_hat, N x K.
struct DenoiserOutput {
  RowMatrix logits;

  CategoricalSeq probs() const { return softmax_rows(logits); }
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual int num_classes() const = 0;

  /// Deterministic given inputs; never draws randomness.
  virtual DenoiserOutput predict_x0(const TokenSeq& x_t, int t, const ConditioningSeq& c) const = 0;
};

}  // namespace difftx
