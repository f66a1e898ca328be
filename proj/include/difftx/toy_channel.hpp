#pragma once

// Synthetic stand-in for speech features: each character emits one or more
// noisy copies of a per-character codebook vector.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "difftx/alphabet.hpp"
#include "difftx/denoiser.hpp"
#include "difftx/random.hpp"
#include "difftx/wordlist.hpp"

namespace difftx {

struct ChannelSpec {
  int dim = 16;
  double sigma_c = 0.3;
  int stretch = 1;
  std::uint64_t seed = 0;
  RowMatrix codebook;  // K x dim

  bool aligned() const noexcept { return stretch == 1; }

  double min_codebook_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index a = 0; a < codebook.rows(); ++a)
      for (Eigen::Index b = a + 1; b < codebook.rows(); ++b)
        best = std::min(best, (codebook.row(a) - codebook.row(b)).norm());
    return best;
  }
};

/// Codebook rows ~ N(0, I), then rescaled (redrawn if degenerate) until the
/// minimum pairwise distance is at least 1.
inline ChannelSpec make_channel(int dim, double sigma_c, int stretch, std::uint64_t seed) {
  if (dim < 1) throw ParameterError("make_channel: d must be >= 1");
  if (!(sigma_c >= 0.0)) throw ParameterError("make_channel: sigma_c must be >= 0");
  if (stretch < 1) throw ParameterError("make_channel: stretch must be >= 1");
  ChannelSpec ch{dim, sigma_c, stretch, seed, RowMatrix(Alphabet::kSize, dim)};
  Rng rng = make_stream(seed, 0, StreamDomain::kCodebook);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int attempt = 0;; ++attempt) {
    for (Eigen::Index r = 0; r < ch.codebook.rows(); ++r)
      for (Eigen::Index c = 0; c < ch.codebook.cols(); ++c) ch.codebook(r, c) = normal(rng);
    const double dmin = ch.min_codebook_distance();
    if (dmin >= 1.0) break;
    if (dmin > 1e-6) {
      ch.codebook *= 1.0 / dmin;
      // rounding can leave dmin a hair under 1
      if (ch.min_codebook_distance() < 1.0) ch.codebook *= 1.0 + 1e-12;
      break;
    }
    if (attempt > 100) throw ParameterError("make_channel: could not build a separated codebook");
  }
  return ch;
}

/// One or more noisy frames per character of `tokens`.
inline ConditioningSeq encode_tokens(const TokenSeq& tokens, const ChannelSpec& channel, Rng& rng) {
  if (tokens.num_classes != channel.codebook.rows())
    throw ShapeError("encode_tokens: alphabet size does not match codebook");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<int> repeats(static_cast<std::size_t>(tokens.size()), 1);
  if (channel.stretch > 1) {
    std::uniform_int_distribution<int> rep(1, channel.stretch);
    for (auto& r : repeats) r = rep(rng);
  }
  int frames = 0;
  for (int r : repeats) frames += r;
  ConditioningSeq c;
  c.frames.resize(frames, channel.dim);
  int row = 0;
  for (int i = 0; i < tokens.size(); ++i) {
    for (int r = 0; r < repeats[static_cast<std::size_t>(i)]; ++r, ++row) {
      c.frames.row(row) = channel.codebook.row(tokens[i]);
      if (channel.sigma_c > 0.0)
        for (int k = 0; k < channel.dim; ++k) c.frames(row, k) += channel.sigma_c * normal(rng);
    }
  }
  return c;
}

inline ConditioningSeq encode_transcript(std::string_view text, const ChannelSpec& channel, Rng& rng) {
  return encode_tokens(Alphabet::encode(text), channel, rng);
}

/// Per-index transcripts composed from a word list, with features that are
/// regenerated on demand from (seed, index). Even indices form the training
/// split, odd indices the held-out split.
class UtteranceSource {
 public:
  UtteranceSource(std::vector<std::string> words, int min_len, int max_len, std::uint64_t seed)
      : words_(std::move(words)), min_len_(min_len), max_len_(max_len), seed_(seed) {
    if (words_.empty()) throw ParameterError("word list is empty");
    std::size_t shortest = words_.front().size();
    for (const auto& w : words_) {
      if (w.empty()) throw ParameterError("word list contains an empty word");
      for (char ch : w)
        if (Alphabet::index_of(ch) < 0 || ch == ' ')
          throw ParameterError("word '" + w + "' has characters outside the alphabet");
      shortest = std::min(shortest, w.size());
    }
    if (min_len_ < 1 || max_len_ < min_len_)
      throw ParameterError("impossible transcript length range [" + std::to_string(min_len_) + ", " +
                           std::to_string(max_len_) + "]");
    if (static_cast<int>(shortest) > max_len_)
      throw ParameterError("no word fits within the maximum transcript length");
    for (auto& w : words_)
      std::transform(w.begin(), w.end(), w.begin(), [](char ch) {
        return ch >= 'a' && ch <= 'z' ? static_cast<char>(ch - 'a' + 'A') : ch;
      });
  }

  static UtteranceSource with_default_words(int min_len, int max_len, std::uint64_t seed) {
    return UtteranceSource(std::vector<std::string>(kDefaultWords.begin(), kDefaultWords.end()),
                           min_len, max_len, seed);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  int min_length() const noexcept { return min_len_; }
  int max_length() const noexcept { return max_len_; }

  std::string transcript(std::uint64_t index) const {
    Rng rng = make_stream(seed_, index, StreamDomain::kTranscript);
    std::uniform_int_distribution<std::size_t> pick(0, words_.size() - 1);
    std::uniform_int_distribution<int> target_len(min_len_, max_len_);
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const int target = target_len(rng);
      std::string text;
      int misses = 0;
      while (static_cast<int>(text.size()) < target && misses < 32) {
        const std::string& w = words_[pick(rng)];
        const std::size_t add = w.size() + (text.empty() ? 0 : 1);
        if (static_cast<int>(text.size() + add) > max_len_) {
          ++misses;
          continue;
        }
        if (!text.empty()) text.push_back(' ');
        text += w;
      }
      if (static_cast<int>(text.size()) >= min_len_) return text;
    }
    throw ParameterError("could not compose a transcript within [" + std::to_string(min_len_) + ", " +
                         std::to_string(max_len_) + "]");
  }

  /// Features for `text` at `index`. `pad_to` > 0 pads the transcript with the
  /// pad symbol first, which is what an aligned N-position decode expects.
  ConditioningSeq features(std::uint64_t index, std::string_view text, const ChannelSpec& channel,
                           int pad_to = 0) const {
    Rng rng = make_stream(seed_, index, StreamDomain::kFeatures);
    return encode_tokens(Alphabet::encode(text, pad_to > 0 ? pad_to : -1), channel, rng);
  }

 private:
  std::vector<std::string> words_;
  int min_len_;
  int max_len_;
  std::uint64_t seed_;
};

enum class Split { kTrain, kHeldOut };

inline std::uint64_t split_index(Split split, std::uint64_t j) {
  return 2 * j + (split == Split::kHeldOut ? 1 : 0);
}

struct Dataset {
  std::vector<std::string> transcripts;
  std::vector<std::uint64_t> indices;  // source index of each transcript
};

inline Dataset generate_dataset(const UtteranceSource& source, std::size_t count,
                                Split split = Split::kTrain) {
  Dataset ds;
  ds.transcripts.reserve(count);
  ds.indices.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    const std::uint64_t idx = split_index(split, j);
    ds.indices.push_back(idx);
    ds.transcripts.push_back(source.transcript(idx));
  }
  return ds;
}

}  // namespace difftx
