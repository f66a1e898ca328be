#pragma once

// Resolved run configuration, stored as a small TOML-style key/value file:
//   [section]
//   key = value
// Strings are double-quoted; numbers are written with enough digits to
// round-trip exactly.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "difftx/decoder.hpp"
#include "difftx/errors.hpp"
#include "difftx/mini_denoiser.hpp"
#include "difftx/toy_channel.hpp"
#include "difftx/trainer.hpp"

namespace difftx {

struct RunConfig {
  struct Schedule {
    int steps = 200;
    double s = 0.008;
  } schedule;

  struct Channel {
    int dim = 16;
    double sigma_c = 0.3;
    int stretch = 1;
    std::uint64_t seed = 7;
  } channel;

  struct Data {
    std::uint64_t seed = 1;
    int min_length = 20;
    int max_length = 60;
    int count = 100;
    std::string split = "heldout";
  } data;

  MiniDenoiserConfig model;

  struct Train {
    int steps = 20000;
    int batch = 32;
    std::uint64_t seed = 11;
    int log_every = 500;
    TrainConfig optimizer;
  } train;

  struct Decode {
    int length = 400;
    double guidance = 1.5;
    std::string strategy = "resample_progressive";
    int jump_length = 10;
    int jumps = 10;
    std::uint64_t seed = 0;
    std::string jump_indexing = "per_anchor";
    double slope_divisor = 8.0;
    int threads = 1;
    std::string denoiser = "mini";  // "mini" (checkpoint) or "oracle"
  } decode;

  struct Paths {
    std::string data;
    std::string checkpoint;
  } paths;

  using FieldRef = std::variant<int*, double*, std::uint64_t*, std::string*>;

  /// Every key in file order.
  std::vector<std::pair<std::string, FieldRef>> fields() {
    return {
        {"schedule.steps", &schedule.steps},
        {"schedule.s", &schedule.s},
        {"channel.dim", &channel.dim},
        {"channel.sigma_c", &channel.sigma_c},
        {"channel.stretch", &channel.stretch},
        {"channel.seed", &channel.seed},
        {"data.seed", &data.seed},
        {"data.min_length", &data.min_length},
        {"data.max_length", &data.max_length},
        {"data.count", &data.count},
        {"data.split", &data.split},
        {"model.blocks", &model.blocks},
        {"model.width", &model.width},
        {"model.heads", &model.heads},
        {"model.ff_width", &model.ff_width},
        {"model.concat_period", &model.concat_period},
        {"model.cond_dropout", &model.cond_dropout},
        {"train.steps", &train.steps},
        {"train.batch", &train.batch},
        {"train.seed", &train.seed},
        {"train.log_every", &train.log_every},
        {"train.learning_rate", &train.optimizer.learning_rate},
        {"train.beta1", &train.optimizer.beta1},
        {"train.beta2", &train.optimizer.beta2},
        {"train.adam_eps", &train.optimizer.adam_eps},
        {"train.warmup_steps", &train.optimizer.warmup_steps},
        {"train.clip_norm", &train.optimizer.clip_norm},
        {"decode.length", &decode.length},
        {"decode.guidance", &decode.guidance},
        {"decode.strategy", &decode.strategy},
        {"decode.jump_length", &decode.jump_length},
        {"decode.jumps", &decode.jumps},
        {"decode.seed", &decode.seed},
        {"decode.jump_indexing", &decode.jump_indexing},
        {"decode.slope_divisor", &decode.slope_divisor},
        {"decode.threads", &decode.threads},
        {"decode.denoiser", &decode.denoiser},
        {"paths.data", &paths.data},
        {"paths.checkpoint", &paths.checkpoint},
    };
  }

  Split data_split() const {
    if (data.split == "train") return Split::kTrain;
    if (data.split == "heldout") return Split::kHeldOut;
    throw ParameterError("data.split must be \"train\" or \"heldout\", got \"" + data.split + "\"");
  }

  MiniDenoiserConfig model_config() const {
    MiniDenoiserConfig m = model;
    m.num_classes = Alphabet::kSize;
    m.cond_dim = channel.dim;
    return m;
  }

  DecodeConfig decode_config() const {
    DecodeConfig d;
    d.steps = schedule.steps;
    d.length = decode.length;
    d.guidance = decode.guidance;
    d.strategy = parse_strategy(decode.strategy);
    d.jump_length = decode.jump_length;
    d.jumps = decode.jumps;
    d.seed = decode.seed;
    if (decode.jump_indexing == "per_anchor") d.jump_indexing = JumpIndexing::kPerAnchor;
    else if (decode.jump_indexing == "global") d.jump_indexing = JumpIndexing::kGlobal;
    else throw ParameterError("decode.jump_indexing must be per_anchor or global");
    d.slope_divisor = decode.slope_divisor;
    return d;
  }

  void validate() const {
    if (schedule.steps < 1) throw ParameterError("schedule.steps must be >= 1");
    if (!(schedule.s > 0.0 && schedule.s < 1.0)) throw ParameterError("schedule.s must be in (0, 1)");
    if (channel.dim < 1) throw ParameterError("channel.dim must be >= 1");
    if (!(channel.sigma_c >= 0.0)) throw ParameterError("channel.sigma_c must be >= 0");
    if (channel.stretch < 1) throw ParameterError("channel.stretch must be >= 1");
    if (data.min_length < 1 || data.max_length < data.min_length)
      throw ParameterError("data length range is empty");
    if (data.count < 0) throw ParameterError("data.count must be >= 0");
    (void)data_split();
    model_config().validate();
    if (train.steps < 0) throw ParameterError("train.steps must be >= 0");
    if (train.batch < 1) throw ParameterError("train.batch must be >= 1");
    if (train.log_every < 1) throw ParameterError("train.log_every must be >= 1");
    train.optimizer.validate();
    decode_config().validate();
    if (decode.threads < 1) throw ParameterError("decode.threads must be >= 1");
    if (decode.denoiser != "mini" && decode.denoiser != "oracle")
      throw ParameterError("decode.denoiser must be \"mini\" or \"oracle\"");
    if (data.max_length > decode.length)
      throw ParameterError("data.max_length exceeds decode.length; transcripts would not fit");
  }

  std::string to_text() const {
    auto& self = const_cast<RunConfig&>(*this);
    std::ostringstream out;
    std::string section;
    for (auto& [key, ref] : self.fields()) {
      const auto dot = key.find('.');
      const std::string sec = key.substr(0, dot);
      if (sec != section) {
        if (!section.empty()) out << '\n';
        out << '[' << sec << "]\n";
        section = sec;
      }
      out << key.substr(dot + 1) << " = ";
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::string>) {
              out << '"' << *p << '"';
            } else if constexpr (std::is_same_v<T, double>) {
              char buf[64];
              auto res = std::to_chars(buf, buf + sizeof(buf), *p);
              out << std::string(buf, res.ptr);
            } else {
              out << *p;
            }
          },
          ref);
      out << '\n';
    }
    return out.str();
  }

  /// Applies `key = value` (key as "section.key"). Unknown keys are errors.
  void set(const std::string& key, const std::string& value) {
    for (auto& [name, ref] : fields()) {
      if (name != key) continue;
      std::visit([&](auto* p) { parse_value(key, value, *p); }, ref);
      return;
    }
    throw ParameterError("unknown config key '" + key + "'");
  }

  static RunConfig parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos && line.find('"') > hash) line.resize(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw ParameterError("config line " + std::to_string(lineno) + ": bad section header");
        section = trim(t.substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ParameterError("config line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(t.substr(0, eq));
      cfg.set(section.empty() ? key : section + "." + key, trim(t.substr(eq + 1)));
    }
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParameterError("cannot read config file " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  template <typename T>
  static void parse_value(const std::string& key, const std::string& raw, T& out) {
    if constexpr (std::is_same_v<T, std::string>) {
      if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"') out = raw.substr(1, raw.size() - 2);
      else out = raw;
    } else {
      const char* b = raw.data();
      const char* e = raw.data() + raw.size();
      auto [ptr, ec] = std::from_chars(b, e, out);
      if (ec != std::errc() || ptr != e) throw ParameterError("config key '" + key + "': cannot parse '" + raw + "'");
    }
  }
};

}  // namespace difftx
