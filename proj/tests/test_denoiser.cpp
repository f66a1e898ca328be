#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "difftx/oracle_denoiser.hpp"
#include "difftx/trainer.hpp"

namespace difftx {
namespace {

ConditioningSeq random_frames(int m, int d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ConditioningSeq c;
  c.frames.resize(m, d);
  for (Eigen::Index i = 0; i < c.frames.size(); ++i) c.frames.data()[i] = normal(rng);
  return c;
}

MiniDenoiserConfig tiny_config() {
  MiniDenoiserConfig cfg;
  cfg.cond_dim = 4;
  cfg.blocks = 1;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.ff_width = 16;
  cfg.concat_period = 1;
  return cfg;
}

// Probe covering the cross-entropy step, several KL steps and an
// unconditional pass.
std::vector<NoisedExample> make_probe(const MiniDenoiserConfig& cfg, const NoiseSchedule& sched, Rng& rng) {
  std::vector<NoisedExample> probe;
  const int n = 5;
  int idx = 0;
  for (int t : {1, 2, sched.steps() / 2, sched.steps()}) {
    NoisedExample ex;
    ex.x0 = sample_seq(CategoricalSeq::uniform(n, cfg.num_classes), rng);
    ex.t = t;
    ex.x_t = sample_seq(forward_marginal_dist(ex.x0, t, sched), rng);
    ex.c = random_frames(n + 1, cfg.cond_dim, rng);
    ex.conditioned = (idx++ != 2);
    probe.push_back(ex);
  }
  return probe;
}

TEST(OracleDenoiser, BinarySymmetricFrameIsUniform) {
  ChannelSpec ch{1, 1.0, 1, 0, RowMatrix(2, 1)};
  ch.codebook << 0.0, 1.0;
  const OracleDenoiser oracle(ch);
  ConditioningSeq c;
  c.frames = RowMatrix::Constant(1, 1, 0.5);
  const CategoricalSeq p = oracle.predict_x0(TokenSeq({0}, 2), 7, c).probs();
  EXPECT_NEAR(p.probs(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(p.probs(0, 1), 0.5, 1e-15);
}

TEST(OracleDenoiser, MatchesGaussianBayesEnumeration) {
  Rng rng(12);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng() % 7);
    const int d = 1 + static_cast<int>(rng() % 4);
    const double sigma = u(rng);
    ChannelSpec ch{d, sigma, 1, 0, RowMatrix(k, d)};
    for (Eigen::Index i = 0; i < ch.codebook.size(); ++i) ch.codebook.data()[i] = normal(rng);
    Eigen::RowVectorXd prior(k);
    for (int j = 0; j < k; ++j) prior(j) = u(rng);
    const OracleDenoiser oracle(ch, prior);
    const ConditioningSeq c = random_frames(3, d, rng);
    const CategoricalSeq p = oracle.predict_x0(TokenSeq({0, 0, 0}, k), 1, c).probs();
    for (int i = 0; i < 3; ++i) {
      std::vector<double> joint(static_cast<std::size_t>(k));
      double z = 0.0;
      for (int j = 0; j < k; ++j) {
        double sq = 0.0;
        for (int e = 0; e < d; ++e) sq += std::pow(c.frames(i, e) - ch.codebook(j, e), 2);
        const double density =
            std::exp(-sq / (2 * sigma * sigma)) / std::pow(2 * std::numbers::pi * sigma * sigma, d / 2.0);
        z += joint[static_cast<std::size_t>(j)] = density * prior(j) / prior.sum();
      }
      for (int j = 0; j < k; ++j) EXPECT_NEAR(p.probs(i, j), joint[static_cast<std::size_t>(j)] / z, 1e-12);
    }
  }
}

TEST(OracleDenoiser, NoiselessChannelRecoversTranscript) {
  const ChannelSpec ch = make_channel(16, 0.0, 1, 7);
  const OracleDenoiser oracle(ch);
  Rng rng(3);
  const TokenSeq x = Alphabet::encode("MISTER QUILTER IS THE APOSTLE", 32);
  const ConditioningSeq c = encode_tokens(x, ch, rng);
  const CategoricalSeq p = oracle.predict_x0(x, 100, c).probs();
  EXPECT_LE((p.probs - CategoricalSeq::one_hot(x).probs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(OracleDenoiser, UnconditionalPassIgnoresFrames) {
  const OracleDenoiser oracle(make_channel(16, 0.3, 1, 7));
  Rng rng(1);
  const TokenSeq x = sample_seq(CategoricalSeq::uniform(6, 29), rng);
  const DenoiserOutput a = oracle.predict_x0(x, 3, random_frames(6, 16, rng).dropped());
  const DenoiserOutput b = oracle.predict_x0(x, 3, ConditioningSeq::unconditional(16));
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_TRUE(a.probs().is_normalized());
}

TEST(OracleDenoiser, RejectsMisalignedFrames) {
  const OracleDenoiser oracle(make_channel(16, 0.3, 1, 7));
  Rng rng(1);
  EXPECT_THROW(oracle.predict_x0(TokenSeq({0, 1, 2}, 29), 3, random_frames(4, 16, rng)), ShapeError);
  EXPECT_THROW(oracle.predict_x0(TokenSeq({0, 1, 2}, 29), 3, random_frames(3, 8, rng)), ShapeError);
}

TEST(MiniDenoiser, ZeroHeadGivesUniformRows) {
  MiniDenoiserConfig cfg;
  Rng rng(1);
  const MiniDenoiser<float> den(cfg, init_params<float>(cfg, rng));
  const CategoricalSeq p = den.predict_x0(TokenSeq(std::vector<int>(10, 3), 29), 50, random_frames(10, 16, rng)).probs();
  EXPECT_LE((p.probs.array() - 1.0 / 29).abs().maxCoeff(), 1e-12);
}

TEST(MiniDenoiser, ConditioningPathIsLiveAndDeterministic) {
  MiniDenoiserConfig cfg;
  Rng rng(2);
  const MiniDenoiser<float> den(cfg, init_params<float>(cfg, rng, false));
  const TokenSeq x = sample_seq(CategoricalSeq::uniform(12, 29), rng);
  const ConditioningSeq c = random_frames(12, 16, rng);
  const DenoiserOutput cond = den.predict_x0(x, 40, c);
  EXPECT_EQ(cond.logits, den.predict_x0(x, 40, c).logits);
  EXPECT_GT((cond.logits - den.predict_x0(x, 40, c.dropped()).logits).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_TRUE(cond.logits.allFinite());

  const Eigen::VectorXd sums = softmax_rows(cond.logits.cast<float>().cast<double>()).probs.rowwise().sum();
  for (Eigen::Index i = 0; i < sums.size(); ++i) EXPECT_NEAR(sums(i), 1.0, 1e-6);
}

TEST(MiniDenoiser, UnconditionalOutputIgnoresFrameContent) {
  MiniDenoiserConfig cfg;
  Rng rng(4);
  const MiniDenoiser<double> den(cfg, init_params<double>(cfg, rng, false));
  const TokenSeq x = sample_seq(CategoricalSeq::uniform(9, 29), rng);
  const DenoiserOutput a = den.predict_x0(x, 5, random_frames(9, 16, rng).dropped());
  const DenoiserOutput b = den.predict_x0(x, 5, random_frames(30, 16, rng).dropped());
  EXPECT_EQ(a.logits, b.logits);
}

TEST(MiniDenoiser, LengthChangesAtInference) {
  MiniDenoiserConfig cfg;
  Rng rng(5);
  const MiniDenoiser<float> den(cfg, init_params<float>(cfg, rng, false));
  for (int n : {16, 32, 64}) {
    const DenoiserOutput out =
        den.predict_x0(sample_seq(CategoricalSeq::uniform(n, 29), rng), 10, random_frames(n, 16, rng));
    EXPECT_EQ(out.logits.rows(), n);
    EXPECT_EQ(out.logits.cols(), 29);
  }
}

TEST(MiniDenoiser, TrainingDropoutPicksOneOfTheTwoPasses) {
  MiniDenoiserConfig cfg;
  cfg.cond_dropout = 0.5;
  Rng rng(6);
  const MiniDenoiser<float> den(cfg, init_params<float>(cfg, rng, false));
  const TokenSeq x = sample_seq(CategoricalSeq::uniform(8, 29), rng);
  const ConditioningSeq c = random_frames(8, 16, rng);
  const RowMatrix cond = den.predict_x0(x, 20, c).logits, uncond = den.predict_x0(x, 20, c.dropped()).logits;
  ASSERT_NE(cond, uncond);
  int dropped = 0;
  const int draws = 400;
  for (int i = 0; i < draws; ++i) {
    const RowMatrix out = den.forward_train(x, 20, c, rng).logits;
    ASSERT_TRUE(out == cond || out == uncond);
    dropped += out == uncond;
  }
  EXPECT_NEAR(dropped, draws / 2, 3 * std::sqrt(draws * 0.25));
}

TEST(MiniDenoiser, ZeroDropoutKeepsConditioning) {
  MiniDenoiserConfig cfg;
  cfg.cond_dropout = 0.0;
  Rng rng(8);
  const MiniDenoiser<float> den(cfg, init_params<float>(cfg, rng, false));
  const TokenSeq x = sample_seq(CategoricalSeq::uniform(8, 29), rng);
  const ConditioningSeq c = random_frames(8, 16, rng);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(den.forward_train(x, 20, c, rng).logits, den.predict_x0(x, 20, c).logits);
}

TEST(MiniDenoiser, ShapeErrors) {
  MiniDenoiserConfig cfg;
  Rng rng(7);
  const MiniDenoiser<float> den(cfg, init_params<float>(cfg, rng));
  EXPECT_THROW(den.predict_x0(TokenSeq({0, 1}, 5), 1, random_frames(2, 16, rng)), ShapeError);
  EXPECT_THROW(den.predict_x0(TokenSeq({0, 1}, 29), 1, random_frames(2, 8, rng)), ShapeError);
  EXPECT_THROW(den.predict_x0(TokenSeq({0, 1}, 29), 1, random_frames(0, 16, rng)), ShapeError);
}

TEST(MiniDenoiserConfig, Validation) {
  MiniDenoiserConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = {};
  cfg.blocks = 0;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = {};
  cfg.concat_period = 0;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = {};
  cfg.cond_dropout = 1.0;
  EXPECT_THROW(cfg.validate(), ParameterError);
}

TEST(GradCheck, AnalyticGradientMatchesFiniteDifferences) {
  const MiniDenoiserConfig cfg = tiny_config();
  const NoiseSchedule sched = cosine_schedule(200);
  Rng rng(31);
  const MiniParams<double> params = init_params<double>(cfg, rng, false);
  const auto probe = make_probe(cfg, sched, rng);
  const GradCheckResult r = grad_check(params, cfg, probe, sched, 1e-4, 3);
  EXPECT_GT(r.checked, 300u);
  EXPECT_LE(r.max_rel_error, 1e-4) << "worst: " << r.worst_param;
}

TEST(GradCheck, DetectsSignFlip) {
  const MiniDenoiserConfig cfg = tiny_config();
  const NoiseSchedule sched = cosine_schedule(200);
  Rng rng(32);
  const MiniParams<double> params = init_params<double>(cfg, rng, false);
  const auto probe = make_probe(cfg, sched, rng);
  const GradCheckResult r =
      grad_check(params, cfg, probe, sched, 1e-4, 1, [](MiniParams<double>& g) { g.blocks[0].wq *= -1.0; });
  EXPECT_GT(r.max_rel_error, 0.1);
  EXPECT_NE(r.worst_param.find("block0.attn.wq"), std::string::npos) << r.worst_param;
}

TEST(BatchLoss, InvariantToBatchOrder) {
  const MiniDenoiserConfig cfg = tiny_config();
  const NoiseSchedule sched = cosine_schedule(200);
  Rng rng(33);
  const MiniParams<double> params = init_params<double>(cfg, rng, false);
  auto probe = make_probe(cfg, sched, rng);
  MiniParams<double> g1 = MiniParams<double>::zeros(cfg), g2 = MiniParams<double>::zeros(cfg);
  const double l1 = batch_loss<double>(params, cfg, probe, sched, &g1).total;
  std::reverse(probe.begin(), probe.end());
  const double l2 = batch_loss<double>(params, cfg, probe, sched, &g2).total;
  EXPECT_NEAR(l1, l2, 1e-12 * std::abs(l1));
  std::vector<const nn::Mat<double>*> a, b;
  g1.visit([&](const std::string&, const nn::Mat<double>& m) { a.push_back(&m); });
  g2.visit([&](const std::string&, const nn::Mat<double>& m) { b.push_back(&m); });
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_LE((*a[i] - *b[i]).cwiseAbs().maxCoeff(), 1e-12 * (1.0 + a[i]->cwiseAbs().maxCoeff()));
}

std::vector<TrainExample> fixed_batch(const MiniDenoiserConfig& cfg, int n, Rng& rng) {
  std::vector<TrainExample> batch;
  for (int b = 0; b < 4; ++b)
    batch.push_back({sample_seq(CategoricalSeq::uniform(n, cfg.num_classes), rng), random_frames(n, cfg.cond_dim, rng)});
  return batch;
}

TEST(TrainStep, ZeroLearningRateLeavesParamsUnchanged) {
  const MiniDenoiserConfig cfg = tiny_config();
  const NoiseSchedule sched = cosine_schedule(50);
  Rng rng(40);
  MiniParams<float> params = init_params<float>(cfg, rng, false);
  const MiniParams<float> before = params;
  AdamState<float> opt = AdamState<float>::zeros(cfg);
  TrainConfig tc;
  tc.learning_rate = 0.0;
  const auto batch = fixed_batch(cfg, 6, rng);
  for (int s = 0; s < 3; ++s) train_step<float>(params, cfg, batch, sched, opt, tc, rng);
  std::vector<nn::Mat<float>> a, b;
  params.visit([&](const std::string&, const nn::Mat<float>& m) { a.push_back(m); });
  before.visit([&](const std::string&, const nn::Mat<float>& m) { b.push_back(m); });
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_EQ(opt.step, 3);
}

TEST(TrainStep, NonFiniteLossThrowsBeforeUpdating) {
  const MiniDenoiserConfig cfg = tiny_config();
  const NoiseSchedule sched = cosine_schedule(50);
  Rng rng(41);
  MiniParams<float> params = init_params<float>(cfg, rng, false);
  params.blocks[0].wv(0, 0) = std::numeric_limits<float>::quiet_NaN();
  AdamState<float> opt = AdamState<float>::zeros(cfg);
  const auto batch = fixed_batch(cfg, 6, rng);
  const MiniParams<float> before = params;
  EXPECT_THROW(train_step<float>(params, cfg, batch, sched, opt, TrainConfig{}, rng), TrainingError);
  EXPECT_EQ(opt.step, 0);
  EXPECT_EQ(params.head_w, before.head_w);
}

TEST(TrainStep, LossDecreasesOnFixedBatch) {
  MiniDenoiserConfig cfg = tiny_config();
  cfg.width = 16;
  cfg.ff_width = 32;
  const NoiseSchedule sched = cosine_schedule(50);
  Rng rng(42);
  MiniParams<float> params = init_params<float>(cfg, rng);
  AdamState<float> opt = AdamState<float>::zeros(cfg);
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.warmup_steps = 10;
  const auto batch = fixed_batch(cfg, 8, rng);
  // Fixed noised copies of the batch at several t, so the tracked loss is
  // free of the t-sampling noise of the training steps.
  std::vector<NoisedExample> probe;
  for (const auto& ex : batch)
    for (int t : {1, 10, 25, 40, 50})
      probe.push_back({ex.x0, sample_seq(forward_marginal_dist(ex.x0, t, sched), rng), t, ex.c, true});
  std::vector<double> losses;
  for (int s = 0; s < 200; ++s) {
    train_step<float>(params, cfg, batch, sched, opt, tc, rng);
    losses.push_back(batch_loss<float>(params, cfg, probe, sched, nullptr).total);
  }
  std::vector<double> window_means;
  for (int w = 0; w < 10; ++w) {
    double acc = 0.0;
    for (int s = 20 * w; s < 20 * (w + 1); ++s) acc += losses[static_cast<std::size_t>(s)];
    window_means.push_back(acc / 20);
  }
  for (std::size_t w = 1; w < window_means.size(); ++w)
    EXPECT_LT(window_means[w], window_means[w - 1]) << "window " << w;
  EXPECT_LT(window_means.back(), 0.75 * window_means.front());
}

TEST(TrainConfig, WarmupAndValidation) {
  TrainConfig tc;
  EXPECT_DOUBLE_EQ(tc.lr_at(250), 1.5e-4);
  EXPECT_DOUBLE_EQ(tc.lr_at(500), 3e-4);
  EXPECT_DOUBLE_EQ(tc.lr_at(5000), 3e-4);
  tc.clip_norm = 0.0;
  EXPECT_THROW(tc.validate(), ParameterError);
}

TEST(Params, CastRoundTripAndCount) {
  MiniDenoiserConfig cfg;
  Rng rng(50);
  const MiniParams<float> p = init_params<float>(cfg, rng, false);
  const MiniParams<float> back = p.cast<double>().cast<float>();
  EXPECT_EQ(p.head_w, back.head_w);
  EXPECT_EQ(p.blocks[1].ff_w2, back.blocks[1].ff_w2);
  std::size_t count = 0;
  p.visit([&](const std::string&, const nn::Mat<float>& m) { count += static_cast<std::size_t>(m.size()); });
  EXPECT_EQ(count, p.parameter_count());
}

}  // namespace
}  // namespace difftx
