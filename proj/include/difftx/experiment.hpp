#pragma once

// Glue shared by the CLI and the acceptance suite: builds the schedule,
// channel and data source from a RunConfig, runs training loops, and decodes
// lists of transcripts.

#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "difftx/checkpoint.hpp"
#include "difftx/decoder.hpp"
#include "difftx/eval_text.hpp"
#include "difftx/oracle_denoiser.hpp"
#include "difftx/run_config.hpp"
#include "difftx/toy_channel.hpp"
#include "difftx/trainer.hpp"

namespace difftx {

inline NoiseSchedule schedule_for(const RunConfig& cfg) { return cosine_schedule(cfg.schedule.steps, cfg.schedule.s); }

inline ChannelSpec channel_for(const RunConfig& cfg) {
  return make_channel(cfg.channel.dim, cfg.channel.sigma_c, cfg.channel.stretch, cfg.channel.seed);
}

inline UtteranceSource source_for(const RunConfig& cfg) {
  return UtteranceSource::with_default_words(cfg.data.min_length, cfg.data.max_length, cfg.data.seed);
}

/// Transcript `text` at source index `index` as a training/decoding pair:
/// tokens padded to `length`, and features for the padded sequence.
inline TrainExample make_example(const UtteranceSource& source, const ChannelSpec& channel, std::uint64_t index,
                                 const std::string& text, int length) {
  return TrainExample{Alphabet::encode(text, length), source.features(index, text, channel, length)};
}

struct TrainLogEntry {
  std::int64_t step;
  LossBreakdown loss;
  double grad_norm;
  double learning_rate;
};

/// Runs cfg.train.steps optimizer updates starting from `ck`. Without
/// `transcripts`, every example is a fresh training-split utterance (index
/// derived from the global step); otherwise examples are drawn from the given
/// lines, whose source indices are `indices`.
inline void train_model(const RunConfig& cfg, Checkpoint& ck, const std::vector<std::string>* transcripts = nullptr,
                        const std::vector<std::uint64_t>* indices = nullptr,
                        const std::function<void(const TrainLogEntry&)>& on_log = {}) {
  const NoiseSchedule sched = schedule_for(cfg);
  const ChannelSpec channel = channel_for(cfg);
  const UtteranceSource source = source_for(cfg);
  const int n = cfg.decode.length;
  const int batch = cfg.train.batch;
  if (transcripts && (transcripts->empty() || !indices || indices->size() != transcripts->size()))
    throw ParameterError("train: dataset is empty or its index list does not match");

  LossBreakdown window;
  double norm_window = 0.0;
  int window_count = 0;
  std::vector<TrainExample> examples(static_cast<std::size_t>(batch));
  const std::int64_t end = ck.step + cfg.train.steps;
  while (ck.step < end) {
    Rng rng = make_stream(cfg.train.seed, static_cast<std::uint64_t>(ck.step), StreamDomain::kTrain);
    for (int b = 0; b < batch; ++b) {
      if (transcripts) {
        const std::size_t line = static_cast<std::size_t>(rng() % transcripts->size());
        examples[static_cast<std::size_t>(b)] =
            make_example(source, channel, (*indices)[line], (*transcripts)[line], n);
      } else {
        const std::uint64_t idx =
            split_index(Split::kTrain, static_cast<std::uint64_t>(ck.step) * static_cast<std::uint64_t>(batch) +
                                           static_cast<std::uint64_t>(b));
        examples[static_cast<std::size_t>(b)] = make_example(source, channel, idx, source.transcript(idx), n);
      }
    }
    const StepResult r = train_step<float>(ck.params, ck.config, examples, sched, ck.optimizer, cfg.train.optimizer, rng);
    ++ck.step;
    window += r.loss;
    norm_window += r.grad_norm;
    ++window_count;
    if (on_log && (ck.step % cfg.train.log_every == 0 || ck.step == end)) {
      const double inv = 1.0 / window_count;
      on_log({ck.step, {window.kl_term * inv, window.ce_term * inv, window.total * inv}, norm_window * inv,
              r.learning_rate});
      window = {};
      norm_window = 0.0;
      window_count = 0;
    }
  }
}

inline Checkpoint fresh_checkpoint(const RunConfig& cfg) {
  Rng rng = make_stream(cfg.train.seed, 0, StreamDomain::kInit);
  const MiniDenoiserConfig mc = cfg.model_config();
  return Checkpoint::fresh(mc, init_params<float>(mc, rng));
}

/// Features for every transcript, in order.
inline std::vector<ConditioningSeq> conditioning_for(const RunConfig& cfg, const std::vector<std::string>& texts,
                                                     const std::vector<std::uint64_t>& indices) {
  const ChannelSpec channel = channel_for(cfg);
  const UtteranceSource source = source_for(cfg);
  std::vector<ConditioningSeq> conds;
  conds.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i)
    conds.push_back(source.features(indices[i], texts[i], channel, cfg.decode.length));
  return conds;
}

/// Decodes the utterances and returns normalized hypothesis texts.
inline std::vector<std::string> decode_texts(const Denoiser& denoiser, const RunConfig& cfg,
                                             const std::vector<ConditioningSeq>& conds) {
  DecodeConfig dc = cfg.decode_config();
  dc.capture_trace = false;
  const auto results =
      decode_many(denoiser, conds, dc, schedule_for(cfg), static_cast<unsigned>(cfg.decode.threads));
  std::vector<std::string> hyps;
  hyps.reserve(results.size());
  for (const auto& r : results) hyps.push_back(normalize_text(tokens_to_text(r.tokens)));
  return hyps;
}

}  // namespace difftx
