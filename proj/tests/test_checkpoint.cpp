#include <gtest/gtest.h>

#include <filesystem>

#include "difftx/checkpoint.hpp"
#include "difftx/run_config.hpp"

namespace difftx {
namespace {

Checkpoint trained_checkpoint() {
  MiniDenoiserConfig cfg;
  cfg.width = 16;
  cfg.ff_width = 32;
  cfg.heads = 2;
  cfg.blocks = 3;
  Rng rng(1);
  Checkpoint ck = Checkpoint::fresh(cfg, init_params<float>(cfg, rng, false));
  std::normal_distribution<float> normal(0.0f, 1.0f);
  ck.optimizer.m.visit([&](const std::string&, nn::Mat<float>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  });
  ck.optimizer.v.visit([&](const std::string&, nn::Mat<float>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::abs(normal(rng));
  });
  ck.optimizer.step = 1234;
  ck.step = 1234;
  ck.params.head_b(0, 3) = -0.0f;
  ck.params.head_b(0, 4) = std::numeric_limits<float>::denorm_min();
  return ck;
}

void expect_bit_equal(const Checkpoint& a, const Checkpoint& b) {
  EXPECT_EQ(a.config, b.config);
  EXPECT_EQ(a.step, b.step);
  EXPECT_EQ(a.optimizer.step, b.optimizer.step);
  // Re-serializing is the strictest comparison: it covers every tensor bit.
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
  std::vector<const nn::Mat<float>*> pa, pb;
  a.params.visit([&](const std::string&, const nn::Mat<float>& m) { pa.push_back(&m); });
  b.params.visit([&](const std::string&, const nn::Mat<float>& m) { pb.push_back(&m); });
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_EQ(std::memcmp(pa[i]->data(), pb[i]->data(), static_cast<std::size_t>(pa[i]->size()) * 4), 0);
}

CheckpointError::Kind kind_of(const std::string& bytes) {
  try {
    deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return CheckpointError::Kind::kIo;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Checkpoint ck = trained_checkpoint();
  expect_bit_equal(ck, deserialize_checkpoint(serialize_checkpoint(ck)));

  const auto path = std::filesystem::temp_directory_path() / "difftx_ck_roundtrip.bin";
  save_checkpoint(ck, path.string());
  expect_bit_equal(ck, load_checkpoint(path.string()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptedMagicIsVersionError) {
  std::string bytes = serialize_checkpoint(trained_checkpoint());
  bytes[4] = '2';
  EXPECT_EQ(kind_of(bytes), CheckpointError::Kind::kVersion);
}

TEST(Checkpoint, TruncatedDataIsTruncationError) {
  const std::string bytes = serialize_checkpoint(trained_checkpoint());
  EXPECT_EQ(kind_of(bytes.substr(0, bytes.size() - 4)), CheckpointError::Kind::kTruncated);
  EXPECT_EQ(kind_of(bytes + "xxxx"), CheckpointError::Kind::kTruncated);
  EXPECT_EQ(kind_of(bytes.substr(0, 7)), CheckpointError::Kind::kTruncated);
  EXPECT_EQ(kind_of(bytes.substr(0, 40)), CheckpointError::Kind::kTruncated);
}

TEST(Checkpoint, ShapeMismatchIsShapeError) {
  const std::string bytes = serialize_checkpoint(trained_checkpoint());
  // Rewrite the header so the config no longer matches the stored tensors.
  const std::uint32_t len = static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[5])) |
                            static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[6])) << 8 |
                            static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[7])) << 16 |
                            static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8])) << 24;
  nlohmann::json header = nlohmann::json::parse(bytes.substr(9, len));
  header["config"]["ff_width"] = 33;
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 5);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out += bytes.substr(9 + len);
  EXPECT_EQ(kind_of(out), CheckpointError::Kind::kShape);
}

TEST(Checkpoint, GarbageHeaderIsFormatError) {
  std::string out(kCheckpointMagic, 5);
  detail::put_u32(out, 5);
  out += "{oops";
  EXPECT_EQ(kind_of(out), CheckpointError::Kind::kFormat);
}

TEST(Checkpoint, MissingFileIsIoError) {
  try {
    load_checkpoint("/nonexistent/dir/model.ckpt");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kIo);
  }
}

TEST(RunConfig, TextRoundTrip) {
  RunConfig cfg;
  cfg.decode.guidance = 0.1 + 0.2;
  cfg.channel.sigma_c = 1.0 / 3.0;
  cfg.decode.strategy = "guided";
  cfg.paths.data = "some dir/data.txt";
  cfg.train.seed = 18446744073709551615ULL;
  const RunConfig back = RunConfig::parse(cfg.to_text());
  EXPECT_EQ(back.to_text(), cfg.to_text());
  EXPECT_EQ(back.decode.guidance, cfg.decode.guidance);
  EXPECT_EQ(back.channel.sigma_c, cfg.channel.sigma_c);
  EXPECT_EQ(back.paths.data, cfg.paths.data);
  EXPECT_EQ(back.train.seed, cfg.train.seed);
}

TEST(RunConfig, ParsesSectionsAndComments) {
  const RunConfig cfg = RunConfig::parse(
      "# run\n[schedule]\nsteps = 50  # short\n\n[decode]\nstrategy = \"basic\"\nguidance=2.5\n[channel]\nsigma_c = 0.1\n");
  EXPECT_EQ(cfg.schedule.steps, 50);
  EXPECT_EQ(cfg.decode.strategy, "basic");
  EXPECT_EQ(cfg.decode.guidance, 2.5);
  EXPECT_EQ(cfg.channel.sigma_c, 0.1);
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(RunConfig::parse("[decode]\nnope = 1\n"), ParameterError);
  EXPECT_THROW(RunConfig::parse("[schedule]\nsteps = 1x\n"), ParameterError);
  EXPECT_THROW(RunConfig::parse("[schedule\n"), ParameterError);
  EXPECT_THROW(RunConfig::parse("just words\n"), ParameterError);
  RunConfig cfg;
  cfg.decode.strategy = "beam";
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = {};
  cfg.decode.jump_length = 7;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = {};
  cfg.decode.length = 32;
  EXPECT_THROW(cfg.validate(), ParameterError);
  EXPECT_NO_THROW(RunConfig{}.validate());
}

}  // namespace
}  // namespace difftx
