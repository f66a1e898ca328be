#pragma once

// Command-line front end. Subcommands: gen-data, train, decode, eval, trace,
// dump-schedule. Exit status: 0 success, 2 configuration/usage error,
// 3 runtime error (I/O, checkpoint, training).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "difftx/experiment.hpp"

namespace difftx::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

inline constexpr const char* kOutDirEnv = "DIFFTX_OUT_DIR";
inline constexpr const char* kResolvedConfigName = "run_config.toml";

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

inline std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + '\n';
  return out;
}

namespace detail {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
};

/// Typed shortcut flags that map onto config keys.
struct Shortcut {
  std::string key;
  std::optional<std::string> value;
};

inline void add_common(CLI::App* sub, Common& common) {
  sub->add_option("--config", common.config_path, "Run configuration file (key = value, [sections])");
  sub->add_option("--set", common.overrides, "Override a config entry, e.g. --set decode.guidance=2.0");
  sub->add_option("--out-dir", common.out_dir, std::string("Output directory (default: $") + kOutDirEnv + " or .)");
}

inline void add_shortcut(CLI::App* sub, std::vector<Shortcut>& store, const std::string& flag,
                              const std::string& key, const std::string& help) {
  store.push_back({key, std::nullopt});
  sub->add_option_function<std::string>(
      flag, [&store, idx = store.size() - 1](const std::string& v) { store[idx].value = v; }, help);
}

inline RunConfig resolve(const Common& common, const std::vector<Shortcut>& shortcuts) {
  RunConfig cfg = common.config_path.empty() ? RunConfig{} : RunConfig::load(common.config_path);
  for (const auto& s : shortcuts)
    if (s.value) cfg.set(s.key, *s.value);
  for (const auto& o : common.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ParameterError("--set expects key=value, got '" + o + "'");
    cfg.set(o.substr(0, eq), o.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

inline std::filesystem::path out_dir(const Common& common) {
  if (!common.out_dir.empty()) return common.out_dir;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return ".";
}

inline void write_resolved(const Common& common, const RunConfig& cfg) {
  write_text(out_dir(common) / kResolvedConfigName, cfg.to_text());
}

inline std::vector<std::uint64_t> indices_for(const RunConfig& cfg, std::size_t count) {
  std::vector<std::uint64_t> idx(count);
  for (std::size_t j = 0; j < count; ++j) idx[j] = split_index(cfg.data_split(), j);
  return idx;
}

inline std::unique_ptr<Denoiser> load_denoiser(const RunConfig& cfg) {
  if (cfg.decode.denoiser == "oracle") return std::make_unique<OracleDenoiser>(channel_for(cfg));
  if (cfg.paths.checkpoint.empty()) throw ParameterError("decoding with the mini denoiser needs --checkpoint");
  Checkpoint ck = load_checkpoint(cfg.paths.checkpoint);
  if (ck.config.cond_dim != cfg.channel.dim)
    throw ParameterError("checkpoint expects " + std::to_string(ck.config.cond_dim) +
                         "-dim features but channel.dim is " + std::to_string(cfg.channel.dim));
  return std::make_unique<MiniDenoiser<float>>(ck.config, std::move(ck.params));
}

inline std::vector<std::string> load_data(const RunConfig& cfg) {
  if (cfg.paths.data.empty()) throw ParameterError("no dataset given (--data)");
  std::vector<std::string> lines = read_lines(cfg.paths.data);
  for (auto& l : lines) l = normalize_text(l);
  return lines;
}

inline std::string fmt_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace detail

/// Runs one CLI invocation. `args` excludes the program name.
inline int run_command(const std::vector<std::string>& args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Discrete-diffusion transcription toolkit", "difftx"};
  app.require_subcommand(1);
  Common common;
  std::vector<Shortcut> shortcuts;

  // gen-data
  CLI::App* gen = app.add_subcommand("gen-data", "Write synthetic transcripts, one per line");
  add_common(gen, common);
  add_shortcut(gen, shortcuts, "--count", "data.count", "Number of transcripts");
  add_shortcut(gen, shortcuts, "--split", "data.split", "train or heldout");
  add_shortcut(gen, shortcuts, "--data-seed", "data.seed", "Transcript/feature seed");
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output file (default <out-dir>/data.txt)");

  // train
  CLI::App* train = app.add_subcommand("train", "Train the mini denoiser");
  add_common(train, common);
  add_shortcut(train, shortcuts, "--steps", "train.steps", "Optimizer steps");
  add_shortcut(train, shortcuts, "--batch", "train.batch", "Batch size");
  add_shortcut(train, shortcuts, "--lr", "train.learning_rate", "Learning rate");
  add_shortcut(train, shortcuts, "--data", "paths.data", "Train on these transcripts instead of a fresh stream");
  add_shortcut(train, shortcuts, "--N", "decode.length", "Sequence length");
  add_shortcut(train, shortcuts, "--sigma-c", "channel.sigma_c", "Channel noise std");
  std::string init_ckpt, train_out;
  train->add_option("--init", init_ckpt, "Resume from this checkpoint");
  train->add_option("--checkpoint", train_out, "Output checkpoint (default <out-dir>/model.ckpt)");

  // decode / trace share the decoding knobs
  CLI::App* dec = app.add_subcommand("decode", "Decode every transcript's features in a dataset file");
  CLI::App* trace = app.add_subcommand("trace", "Decode one utterance and emit every intermediate state");
  for (CLI::App* sub : {dec, trace}) {
    add_common(sub, common);
    add_shortcut(sub, shortcuts, "--data", "paths.data", "Dataset file (features are regenerated)");
    add_shortcut(sub, shortcuts, "--checkpoint", "paths.checkpoint", "Mini denoiser checkpoint");
    add_shortcut(sub, shortcuts, "--denoiser", "decode.denoiser", "mini or oracle");
    add_shortcut(sub, shortcuts, "--strategy", "decode.strategy", "basic, guided, resample, resample_progressive");
    add_shortcut(sub, shortcuts, "--w", "decode.guidance", "Guidance weight");
    add_shortcut(sub, shortcuts, "--L", "decode.jump_length", "Resampling jump length");
    add_shortcut(sub, shortcuts, "--J", "decode.jumps", "Resampling jump count");
    add_shortcut(sub, shortcuts, "--N", "decode.length", "Sequence length");
    add_shortcut(sub, shortcuts, "--T", "schedule.steps", "Diffusion steps");
    add_shortcut(sub, shortcuts, "--seed", "decode.seed", "Decode seed");
    add_shortcut(sub, shortcuts, "--sigma-c", "channel.sigma_c", "Channel noise std");
    add_shortcut(sub, shortcuts, "--threads", "decode.threads", "Worker threads");
  }
  bool oracle_flag_dec = false, oracle_flag_trace = false;
  dec->add_flag("--oracle", oracle_flag_dec, "Use the exact channel posterior as denoiser");
  trace->add_flag("--oracle", oracle_flag_trace, "Use the exact channel posterior as denoiser");
  std::string hyp_out;
  dec->add_option("--out", hyp_out, "Hypothesis file (default <out-dir>/hyp.txt)");
  std::size_t trace_index = 0;
  trace->add_option("--index", trace_index, "Line of the dataset to decode");

  // eval
  CLI::App* ev = app.add_subcommand("eval", "Score hypotheses against references (WER/CER)");
  add_common(ev, common);
  std::string ref_path, hyp_path;
  ev->add_option("--ref", ref_path, "Reference transcripts")->required();
  ev->add_option("--hyp", hyp_path, "Hypothesis transcripts")->required();

  // dump-schedule
  CLI::App* dump = app.add_subcommand("dump-schedule", "Print the cosine noise schedule as a table");
  int dump_steps = 200;
  double dump_s = 0.008;
  dump->add_option("--T", dump_steps, "Diffusion steps");
  dump->add_option("--s", dump_s, "Cosine schedule offset");

  std::vector<std::string> argv_store{"difftx"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "difftx: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*dump) {
      const NoiseSchedule sched = cosine_schedule(dump_steps, dump_s);
      out << "t\tbeta\talpha\talpha_bar\n";
      for (int t = 1; t <= sched.steps(); ++t)
        out << t << '\t' << fmt_double(sched.beta(t)) << '\t' << fmt_double(sched.alpha(t)) << '\t'
            << fmt_double(sched.alpha_bar(t)) << '\n';
      return kExitOk;
    }

    if (*gen) {
      const RunConfig cfg = resolve(common, shortcuts);
      const Dataset ds = generate_dataset(source_for(cfg), static_cast<std::size_t>(cfg.data.count), cfg.data_split());
      const std::filesystem::path path = gen_out.empty() ? out_dir(common) / "data.txt" : std::filesystem::path(gen_out);
      write_text(path, join_lines(ds.transcripts));
      RunConfig resolved = cfg;
      resolved.paths.data = path.string();
      write_resolved(common, resolved);
      out << "wrote " << ds.transcripts.size() << " transcripts to " << path.string() << '\n';
      return kExitOk;
    }

    if (*train) {
      RunConfig cfg = resolve(common, shortcuts);
      Checkpoint ck = init_ckpt.empty() ? fresh_checkpoint(cfg) : load_checkpoint(init_ckpt);
      if (ck.config.cond_dim != cfg.channel.dim)
        throw ParameterError("checkpoint expects " + std::to_string(ck.config.cond_dim) +
                             "-dim features but channel.dim is " + std::to_string(cfg.channel.dim));
      std::vector<std::string> lines;
      std::vector<std::uint64_t> idx;
      if (!cfg.paths.data.empty()) {
        lines = load_data(cfg);
        idx = indices_for(cfg, lines.size());
      }
      const std::filesystem::path ckpt_path =
          train_out.empty() ? out_dir(common) / "model.ckpt" : std::filesystem::path(train_out);
      std::ostringstream log;
      train_model(cfg, ck, lines.empty() ? nullptr : &lines, lines.empty() ? nullptr : &idx,
                  [&](const TrainLogEntry& e) {
                    const nlohmann::json rec = {{"step", e.step},           {"kl", e.loss.kl_term},
                                                {"ce", e.loss.ce_term},     {"loss", e.loss.total},
                                                {"grad_norm", e.grad_norm}, {"lr", e.learning_rate}};
                    log << rec.dump() << '\n';
                    out << rec.dump() << std::endl;
                  });
      if (ckpt_path.has_parent_path()) std::filesystem::create_directories(ckpt_path.parent_path());
      save_checkpoint(ck, ckpt_path.string());
      write_text(out_dir(common) / "train_log.jsonl", log.str());
      cfg.paths.checkpoint = ckpt_path.string();
      write_resolved(common, cfg);
      return kExitOk;
    }

    if (*dec || *trace) {
      RunConfig cfg = resolve(common, shortcuts);
      if (oracle_flag_dec || oracle_flag_trace) cfg.decode.denoiser = "oracle";
      cfg.validate();
      const std::vector<std::string> texts = load_data(cfg);
      const auto indices = indices_for(cfg, texts.size());
      const auto denoiser = load_denoiser(cfg);
      write_resolved(common, cfg);

      if (*dec) {
        const auto conds = conditioning_for(cfg, texts, indices);
        const auto hyps = decode_texts(*denoiser, cfg, conds);
        const std::filesystem::path path = hyp_out.empty() ? out_dir(common) / "hyp.txt" : std::filesystem::path(hyp_out);
        write_text(path, join_lines(hyps));
        out << "decoded " << hyps.size() << " utterances to " << path.string() << '\n';
        return kExitOk;
      }

      if (trace_index >= texts.size())
        throw ParameterError("--index " + std::to_string(trace_index) + " is past the end of the dataset");
      const std::vector<std::string> one{texts[trace_index]};
      const std::vector<std::uint64_t> one_idx{indices[trace_index]};
      const ConditioningSeq c = conditioning_for(cfg, one, one_idx).front();
      DecodeConfig dc = cfg.decode_config();
      dc.seed = cfg.decode.seed ^ trace_index;
      const DecodeResult res = decode(*denoiser, c, dc, schedule_for(cfg));
      std::ostringstream lines;
      for (const auto& rec : res.trace.steps) {
        const nlohmann::json j = {
            {"t", rec.t}, {"direction", std::string(to_string(rec.direction))}, {"text", Alphabet::render(rec.state)}};
        lines << j.dump() << '\n';
      }
      write_text(out_dir(common) / "trace.jsonl", lines.str());
      out << lines.str();
      return kExitOk;
    }

    if (*ev) {
      const RunConfig cfg = resolve(common, shortcuts);
      const std::vector<std::string> refs = read_lines(ref_path);
      const std::vector<std::string> hyps = read_lines(hyp_path);
      if (refs.size() != hyps.size())
        throw ParameterError("reference file has " + std::to_string(refs.size()) + " lines, hypothesis file has " +
                             std::to_string(hyps.size()));
      std::ostringstream report;
      CorpusScore total;
      for (std::size_t i = 0; i < refs.size(); ++i) {
        const ErrorReport w = wer(refs[i], hyps[i]);
        const ErrorReport c = cer(refs[i], hyps[i]);
        total.wer += w;
        total.cer += c;
        const nlohmann::json j = {{"utt", i},
                                  {"wer", w.rate},
                                  {"cer", c.rate},
                                  {"word_errors", {{"sub", w.substitutions}, {"ins", w.insertions}, {"del", w.deletions}, {"ref", w.ref_length}}},
                                  {"char_errors", {{"sub", c.substitutions}, {"ins", c.insertions}, {"del", c.deletions}, {"ref", c.ref_length}}}};
        report << j.dump() << '\n';
      }
      const nlohmann::json corpus = {{"corpus", true},
                                     {"utterances", refs.size()},
                                     {"wer", total.wer.rate},
                                     {"cer", total.cer.rate},
                                     {"word_errors", total.wer.errors()},
                                     {"words", total.wer.ref_length},
                                     {"char_errors", total.cer.errors()},
                                     {"chars", total.cer.ref_length}};
      report << corpus.dump() << '\n';
      write_text(out_dir(common) / "eval.jsonl", report.str());
      write_resolved(common, cfg);
      out << report.str();
      return kExitOk;
    }
  } catch (const ParameterError& e) {
    err << "difftx: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "difftx: error: " << e.what() << '\n';
    return kExitRuntime;
  }
  err << "difftx: no subcommand given\n";
  return kExitConfig;
}

}  // namespace difftx::cli
