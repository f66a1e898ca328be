#pragma once

// Small transformer x0 predictor with the two conditioning paths: a
// mean-pooled feature summary (plus the timestep embedding) added to the
// character stream in every block, and projected feature frames appended to
// the attention keys/values in every `concat_period`-th block.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "difftx/denoiser.hpp"
#include "difftx/errors.hpp"
#include "difftx/nn.hpp"
#include "difftx/random.hpp"

namespace difftx {

struct MiniDenoiserConfig {
  int num_classes = 29;
  int cond_dim = 16;
  int blocks = 2;
  int width = 64;
  int heads = 4;
  int ff_width = 256;
  int concat_period = 2;
  double cond_dropout = 0.1;

  void validate() const {
    if (num_classes < 2) throw ParameterError("denoiser: num_classes must be >= 2");
    if (cond_dim < 1) throw ParameterError("denoiser: cond_dim must be >= 1");
    if (blocks < 1) throw ParameterError("denoiser: blocks must be >= 1");
    if (width < 2 || width % 2 != 0) throw ParameterError("denoiser: width must be even and >= 2");
    if (heads < 1 || width % heads != 0) throw ParameterError("denoiser: heads must divide width");
    if (ff_width < 1) throw ParameterError("denoiser: ff_width must be >= 1");
    if (concat_period < 1) throw ParameterError("denoiser: concat_period must be >= 1");
    // 1.0 is accepted so the always-unconditional training path can be exercised.
    if (!(cond_dropout >= 0.0 && cond_dropout < 1.0))
      throw ParameterError("denoiser: cond_dropout must be in [0, 1)");
  }

  /// Blocks 0, p, 2p, ... see the feature frames.
  bool concat_block(int b) const noexcept { return b % concat_period == 0; }

  friend bool operator==(const MiniDenoiserConfig&, const MiniDenoiserConfig&) = default;
};

template <typename Scalar>
struct MiniParams {
  using Mat = nn::Mat<Scalar>;

  struct Block {
    Mat ln1_g, ln1_b;
    Mat wq, bq, wk, wv, bv, wo, bo;  // no key bias: it cannot change attention
    Mat ln2_g, ln2_b;
    Mat ff_w1, ff_b1, ff_w2, ff_b2;
  };

  Mat char_embed;                          // K x W
  Mat time_w1, time_b1, time_w2, time_b2;  // timestep tower
  Mat frame_w1, frame_b1, frame_w2, frame_b2;  // per-frame conditioning encoder
  Mat pool_w, pool_b;                      // mean-pooled summary projection
  std::vector<Block> blocks;
  Mat lnf_g, lnf_b;
  Mat head_w, head_b;  // W x K

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    f("char_embed", char_embed);
    f("time.w1", time_w1);
    f("time.b1", time_b1);
    f("time.w2", time_w2);
    f("time.b2", time_b2);
    f("frame.w1", frame_w1);
    f("frame.b1", frame_b1);
    f("frame.w2", frame_w2);
    f("frame.b2", frame_b2);
    f("pool.w", pool_w);
    f("pool.b", pool_b);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      Block& blk = blocks[b];
      f(p + "ln1.g", blk.ln1_g);
      f(p + "ln1.b", blk.ln1_b);
      f(p + "attn.wq", blk.wq);
      f(p + "attn.bq", blk.bq);
      f(p + "attn.wk", blk.wk);
      f(p + "attn.wv", blk.wv);
      f(p + "attn.bv", blk.bv);
      f(p + "attn.wo", blk.wo);
      f(p + "attn.bo", blk.bo);
      f(p + "ln2.g", blk.ln2_g);
      f(p + "ln2.b", blk.ln2_b);
      f(p + "ff.w1", blk.ff_w1);
      f(p + "ff.b1", blk.ff_b1);
      f(p + "ff.w2", blk.ff_w2);
      f(p + "ff.b2", blk.ff_b2);
    }
    f("lnf.g", lnf_g);
    f("lnf.b", lnf_b);
    f("head.w", head_w);
    f("head.b", head_b);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<MiniParams*>(this)->visit([&](const std::string& name, Mat& m) { f(name, static_cast<const Mat&>(m)); });
  }

  /// All-zero tensors with the shapes implied by `cfg`; LayerNorm gains are
  /// zero too, so use `init_params` for a usable model.
  static MiniParams zeros(const MiniDenoiserConfig& cfg) {
    const int k = cfg.num_classes, w = cfg.width, d = cfg.cond_dim, ff = cfg.ff_width;
    auto z = [](int r, int c) { return Mat::Zero(r, c).eval(); };
    MiniParams p;
    p.char_embed = z(k, w);
    p.time_w1 = z(w, w), p.time_b1 = z(1, w), p.time_w2 = z(w, w), p.time_b2 = z(1, w);
    p.frame_w1 = z(d, w), p.frame_b1 = z(1, w), p.frame_w2 = z(w, w), p.frame_b2 = z(1, w);
    p.pool_w = z(d, w), p.pool_b = z(1, w);
    p.blocks.resize(static_cast<std::size_t>(cfg.blocks));
    for (auto& b : p.blocks) {
      b.ln1_g = z(1, w), b.ln1_b = z(1, w);
      b.wq = z(w, w), b.bq = z(1, w), b.wk = z(w, w);
      b.wv = z(w, w), b.bv = z(1, w), b.wo = z(w, w), b.bo = z(1, w);
      b.ln2_g = z(1, w), b.ln2_b = z(1, w);
      b.ff_w1 = z(w, ff), b.ff_b1 = z(1, ff), b.ff_w2 = z(ff, w), b.ff_b2 = z(1, w);
    }
    p.lnf_g = z(1, w), p.lnf_b = z(1, w);
    p.head_w = z(w, k), p.head_b = z(1, k);
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  void set_zero() {
    visit([](const std::string&, Mat& m) { m.setZero(); });
  }

  template <typename Other>
  MiniParams<Other> cast() const {
    MiniParams<Other> out;
    std::vector<const Mat*> src;
    visit([&](const std::string&, const Mat& m) { src.push_back(&m); });
    out.blocks.resize(blocks.size());
    std::size_t i = 0;
    out.visit([&](const std::string&, nn::Mat<Other>& m) { m = src[i++]->template cast<Other>(); });
    return out;
  }
};

/// Affine weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero,
/// LayerNorm gains one, output head zero (so x0_hat starts uniform).
template <typename Scalar>
MiniParams<Scalar> init_params(const MiniDenoiserConfig& cfg, Rng& rng, bool zero_head = true) {
  cfg.validate();
  MiniParams<Scalar> p = MiniParams<Scalar>::zeros(cfg);
  auto fill = [&](nn::Mat<Scalar>& m, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(u(rng));
  };
  auto fan_in = [&](nn::Mat<Scalar>& m) { fill(m, 1.0 / std::sqrt(static_cast<double>(m.rows()))); };
  fill(p.char_embed, 1.0);
  fan_in(p.time_w1), fan_in(p.time_w2);
  fan_in(p.frame_w1), fan_in(p.frame_w2);
  fan_in(p.pool_w);
  for (auto& b : p.blocks) {
    b.ln1_g.setOnes(), b.ln2_g.setOnes();
    fan_in(b.wq), fan_in(b.wk), fan_in(b.wv), fan_in(b.wo);
    fan_in(b.ff_w1), fan_in(b.ff_w2);
  }
  p.lnf_g.setOnes();
  if (!zero_head) fan_in(p.head_w);
  return p;
}

/// Everything the backward pass needs from one forward pass of one example.
template <typename Scalar>
struct MiniForwardCache {
  using Mat = nn::Mat<Scalar>;
  struct BlockCache {
    Mat s;  // block input with timestep/summary added
    nn::LayerNormCache<Scalar> ln1;
    Mat h, kv_in, q, k, v;
    std::vector<Mat> probs;  // per head, N x Lk
    Mat attn;                // concatenated head outputs, N x W
    Mat mid;
    nn::LayerNormCache<Scalar> ln2;
    Mat h2, ff_pre, ff_act;
    bool concat = false;
  };

  std::vector<int> tokens;
  bool conditioned = false;
  Mat time_in, time_pre, time_act;  // 1 x W
  Mat frames, frame_pre, frame_act, frame_out;  // M x ...
  Mat frame_mean;                               // 1 x d
  std::vector<BlockCache> blocks;
  nn::LayerNormCache<Scalar> lnf;
  Mat final_h;
  Mat logits;  // N x K
};

/// One example through the network. `conditioned == false` is the
/// unconditional pass: no summary term and no frames in the keys/values.
template <typename Scalar>
MiniForwardCache<Scalar> mini_forward_cached(const MiniParams<Scalar>& p, const MiniDenoiserConfig& cfg,
                                             const TokenSeq& x_t, int t, const ConditioningSeq& c,
                                             bool conditioned) {
  using Mat = nn::Mat<Scalar>;
  const int n = x_t.size();
  const int w = cfg.width;
  if (x_t.num_classes != cfg.num_classes) throw ShapeError("denoiser: alphabet size mismatch");
  if (n < 1) throw ShapeError("denoiser: empty sequence");
  conditioned = conditioned && c.present;
  if (conditioned) {
    if (c.num_frames() < 1) throw ShapeError("denoiser: conditioning has no frames");
    if (c.dim() != cfg.cond_dim)
      throw ShapeError("denoiser: conditioning dim " + std::to_string(c.dim()) + " != " +
                       std::to_string(cfg.cond_dim));
  }

  MiniForwardCache<Scalar> cache;
  cache.tokens = x_t.tokens;
  cache.conditioned = conditioned;

  Mat x = nn::position_table<Scalar>(n, w);
  for (int i = 0; i < n; ++i) x.row(i) += p.char_embed.row(x_t[i]);

  cache.time_in.resize(1, w);
  nn::sinusoid_row<Scalar>(static_cast<double>(t), w, cache.time_in.data());
  nn::affine(cache.time_in, p.time_w1, p.time_b1, cache.time_pre);
  cache.time_act = nn::silu(cache.time_pre);
  Mat added;
  nn::affine(cache.time_act, p.time_w2, p.time_b2, added);

  if (conditioned) {
    cache.frames = c.frames.template cast<Scalar>();
    cache.frame_mean = cache.frames.colwise().mean();
    Mat pooled;
    nn::affine(cache.frame_mean, p.pool_w, p.pool_b, pooled);
    added += pooled;
    nn::affine(cache.frames, p.frame_w1, p.frame_b1, cache.frame_pre);
    cache.frame_act = nn::silu(cache.frame_pre);
    nn::affine(cache.frame_act, p.frame_w2, p.frame_b2, cache.frame_out);
    cache.frame_out += nn::position_table<Scalar>(c.num_frames(), w);
  }

  const int dh = w / cfg.heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  cache.blocks.resize(p.blocks.size());
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const auto& pb = p.blocks[b];
    auto& bc = cache.blocks[b];
    bc.concat = conditioned && cfg.concat_block(static_cast<int>(b));
    bc.s = x;
    bc.s.rowwise() += added.row(0);
    bc.h = nn::layer_norm(bc.s, pb.ln1_g, pb.ln1_b, bc.ln1);
    if (bc.concat) {
      bc.kv_in.resize(n + cache.frame_out.rows(), w);
      bc.kv_in.topRows(n) = bc.h;
      bc.kv_in.bottomRows(cache.frame_out.rows()) = cache.frame_out;
    } else {
      bc.kv_in = bc.h;
    }
    nn::affine(bc.h, pb.wq, pb.bq, bc.q);
    bc.k.noalias() = bc.kv_in * pb.wk;
    nn::affine(bc.kv_in, pb.wv, pb.bv, bc.v);
    bc.attn.resize(n, w);
    bc.probs.resize(static_cast<std::size_t>(cfg.heads));
    for (int hd = 0; hd < cfg.heads; ++hd) {
      Mat& pr = bc.probs[static_cast<std::size_t>(hd)];
      pr.noalias() = bc.q.middleCols(hd * dh, dh) * bc.k.middleCols(hd * dh, dh).transpose();
      pr *= scale;
      nn::softmax_rows_inplace(pr);
      bc.attn.middleCols(hd * dh, dh).noalias() = pr * bc.v.middleCols(hd * dh, dh);
    }
    Mat proj;
    nn::affine(bc.attn, pb.wo, pb.bo, proj);
    bc.mid = bc.s + proj;
    bc.h2 = nn::layer_norm(bc.mid, pb.ln2_g, pb.ln2_b, bc.ln2);
    nn::affine(bc.h2, pb.ff_w1, pb.ff_b1, bc.ff_pre);
    bc.ff_act = bc.ff_pre.cwiseMax(Scalar(0));
    Mat ff_out;
    nn::affine(bc.ff_act, pb.ff_w2, pb.ff_b2, ff_out);
    x = bc.mid + ff_out;
  }
  cache.final_h = nn::layer_norm(x, p.lnf_g, p.lnf_b, cache.lnf);
  nn::affine(cache.final_h, p.head_w, p.head_b, cache.logits);
  return cache;
}

/// Accumulates dL/dparams into `grads` given dL/dlogits.
template <typename Scalar>
void mini_backward(const MiniParams<Scalar>& p, const MiniDenoiserConfig& cfg,
                   const MiniForwardCache<Scalar>& cache, const nn::Mat<Scalar>& dlogits,
                   MiniParams<Scalar>& grads) {
  using Mat = nn::Mat<Scalar>;
  const int w = cfg.width;
  const int dh = w / cfg.heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const Eigen::Index n = dlogits.rows();

  Mat dh_final = nn::affine_backward(cache.final_h, p.head_w, dlogits, grads.head_w, grads.head_b);
  Mat dx = nn::layer_norm_backward(dh_final, p.lnf_g, cache.lnf, grads.lnf_g, grads.lnf_b);

  Mat dadded = Mat::Zero(1, w);
  Mat dframe_out;
  if (cache.conditioned) dframe_out = Mat::Zero(cache.frame_out.rows(), w);

  for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
    const auto& pb = p.blocks[bi];
    const auto& bc = cache.blocks[bi];
    auto& gb = grads.blocks[bi];

    // feed-forward sub-block
    Mat dmid = dx;
    Mat dff_act = nn::affine_backward(bc.ff_act, pb.ff_w2, dx, gb.ff_w2, gb.ff_b2);
    Mat dff_pre = dff_act.binaryExpr(bc.ff_pre, [](Scalar g, Scalar v) { return v > Scalar(0) ? g : Scalar(0); });
    Mat dh2 = nn::affine_backward(bc.h2, pb.ff_w1, dff_pre, gb.ff_w1, gb.ff_b1);
    dmid += nn::layer_norm_backward(dh2, pb.ln2_g, bc.ln2, gb.ln2_g, gb.ln2_b);

    // attention sub-block
    Mat ds = dmid;
    Mat dattn = nn::affine_backward(bc.attn, pb.wo, dmid, gb.wo, gb.bo);
    const Eigen::Index lk = bc.kv_in.rows();
    Mat dq(n, w), dk(lk, w), dv(lk, w);
    for (int hd = 0; hd < cfg.heads; ++hd) {
      const Mat& pr = bc.probs[static_cast<std::size_t>(hd)];
      const auto do_h = dattn.middleCols(hd * dh, dh);
      Mat dp = do_h * bc.v.middleCols(hd * dh, dh).transpose();
      dv.middleCols(hd * dh, dh).noalias() = pr.transpose() * do_h;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar dot = dp.row(i).dot(pr.row(i));
        dp.row(i) = pr.row(i).array() * (dp.row(i).array() - dot);
      }
      dp *= scale;
      dq.middleCols(hd * dh, dh).noalias() = dp * bc.k.middleCols(hd * dh, dh);
      dk.middleCols(hd * dh, dh).noalias() = dp.transpose() * bc.q.middleCols(hd * dh, dh);
    }
    Mat dh = nn::affine_backward(bc.h, pb.wq, dq, gb.wq, gb.bq);
    gb.wk.noalias() += bc.kv_in.transpose() * dk;
    Mat dkv = dk * pb.wk.transpose();
    dkv += nn::affine_backward(bc.kv_in, pb.wv, dv, gb.wv, gb.bv);
    dh += dkv.topRows(n);
    if (bc.concat) dframe_out += dkv.bottomRows(lk - n);
    ds += nn::layer_norm_backward(dh, pb.ln1_g, bc.ln1, gb.ln1_g, gb.ln1_b);

    dadded.row(0) += ds.colwise().sum();
    dx = std::move(ds);
  }

  for (Eigen::Index i = 0; i < n; ++i) grads.char_embed.row(cache.tokens[static_cast<std::size_t>(i)]) += dx.row(i);

  Mat dtime_act = nn::affine_backward(cache.time_act, p.time_w2, dadded, grads.time_w2, grads.time_b2);
  Mat dtime_pre = nn::silu_backward(cache.time_pre, dtime_act);
  nn::affine_backward(cache.time_in, p.time_w1, dtime_pre, grads.time_w1, grads.time_b1);

  if (cache.conditioned) {
    nn::affine_backward(cache.frame_mean, p.pool_w, dadded, grads.pool_w, grads.pool_b);
    Mat dframe_act = nn::affine_backward(cache.frame_act, p.frame_w2, dframe_out, grads.frame_w2, grads.frame_b2);
    Mat dframe_pre = nn::silu_backward(cache.frame_pre, dframe_act);
    nn::affine_backward(cache.frames, p.frame_w1, dframe_pre, grads.frame_w1, grads.frame_b1);
  }
}

/// Trainable denoiser. Scalar is float for training/inference, double for
/// gradient verification.
template <typename Scalar>
class MiniDenoiser final : public Denoiser {
 public:
  MiniDenoiser(MiniDenoiserConfig cfg, MiniParams<Scalar> params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
  }

  int num_classes() const override { return cfg_.num_classes; }
  const MiniDenoiserConfig& config() const noexcept { return cfg_; }
  const MiniParams<Scalar>& params() const noexcept { return params_; }
  MiniParams<Scalar>& params() noexcept { return params_; }

  DenoiserOutput predict_x0(const TokenSeq& x_t, int t, const ConditioningSeq& c) const override {
    return DenoiserOutput{mini_forward_cached(params_, cfg_, x_t, t, c, c.present).logits.template cast<double>()};
  }

  /// Training-mode forward: drops the conditioning with probability
  /// cond_dropout. Exactly one uniform is drawn from `rng` per call.
  DenoiserOutput forward_train(const TokenSeq& x_t, int t, const ConditioningSeq& c, Rng& rng) const {
    const bool keep = uniform01(rng) >= cfg_.cond_dropout;
    return DenoiserOutput{
        mini_forward_cached(params_, cfg_, x_t, t, c, keep && c.present).logits.template cast<double>()};
  }

 private:
  MiniDenoiserConfig cfg_;
  MiniParams<Scalar> params_;
};

}  // namespace difftx
