#pragma once

// Single-file checkpoint: 5-byte magic "TFDN1", u32 little-endian header
// length, a JSON header (config, step, tensor table), then every tensor as
// contiguous little-endian float32 in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "difftx/errors.hpp"
#include "difftx/mini_denoiser.hpp"
#include "difftx/trainer.hpp"

namespace difftx {

inline constexpr char kCheckpointMagic[5] = {'T', 'F', 'D', 'N', '1'};

struct Checkpoint {
  MiniDenoiserConfig config;
  MiniParams<float> params;
  AdamState<float> optimizer;
  std::int64_t step = 0;

  static Checkpoint fresh(const MiniDenoiserConfig& cfg, MiniParams<float> params) {
    return Checkpoint{cfg, std::move(params), AdamState<float>::zeros(cfg), 0};
  }
};

inline nlohmann::json config_to_json(const MiniDenoiserConfig& c) {
  return {{"num_classes", c.num_classes}, {"cond_dim", c.cond_dim},         {"blocks", c.blocks},
          {"width", c.width},             {"heads", c.heads},               {"ff_width", c.ff_width},
          {"concat_period", c.concat_period}, {"cond_dropout", c.cond_dropout}};
}

inline MiniDenoiserConfig config_from_json(const nlohmann::json& j) {
  MiniDenoiserConfig c;
  c.num_classes = j.at("num_classes").get<int>();
  c.cond_dim = j.at("cond_dim").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ff_width = j.at("ff_width").get<int>();
  c.concat_period = j.at("concat_period").get<int>();
  c.cond_dropout = j.at("cond_dropout").get<double>();
  return c;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

template <typename F>
void visit_checkpoint_tensors(Checkpoint& ck, F&& f) {
  ck.params.visit([&](const std::string& n, nn::Mat<float>& m) { f(n, m); });
  ck.optimizer.m.visit([&](const std::string& n, nn::Mat<float>& m) { f("adam.m." + n, m); });
  ck.optimizer.v.visit([&](const std::string& n, nn::Mat<float>& m) { f("adam.v." + n, m); });
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  Checkpoint& mut = const_cast<Checkpoint&>(ck);
  nlohmann::json header;
  header["format"] = "TFDN1";
  header["config"] = config_to_json(ck.config);
  header["step"] = ck.step;
  header["adam_step"] = ck.optimizer.step;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  detail::visit_checkpoint_tensors(mut, [&](const std::string& name, nn::Mat<float>& m) {
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * 4;
  });
  header["tensors"] = std::move(tensors);
  header["data_bytes"] = offset;
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + offset);
  detail::visit_checkpoint_tensors(mut, [&](const std::string&, nn::Mat<float>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_u32(out, std::bit_cast<std::uint32_t>(m.data()[i]));
  });
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < sizeof(kCheckpointMagic) + 4)
    throw CheckpointError(Kind::kTruncated, "checkpoint shorter than its fixed preamble");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw CheckpointError(Kind::kVersion, "unrecognized checkpoint magic (expected TFDN1)");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t header_len = detail::get_u32(raw + 5);
  const std::size_t data_start = 9 + static_cast<std::size_t>(header_len);
  if (bytes.size() < data_start) throw CheckpointError(Kind::kTruncated, "checkpoint header is truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 9, bytes.begin() + static_cast<std::ptrdiff_t>(data_start));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kFormat, std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  try {
    if (header.at("format").get<std::string>() != "TFDN1")
      throw CheckpointError(Kind::kVersion, "unsupported checkpoint format " + header.at("format").dump());
    ck.config = config_from_json(header.at("config"));
    ck.config.validate();
    ck.step = header.at("step").get<std::int64_t>();
    ck.params = MiniParams<float>::zeros(ck.config);
    ck.optimizer = AdamState<float>::zeros(ck.config);
    ck.optimizer.step = header.at("adam_step").get<std::int64_t>();

    const std::uint64_t data_bytes = header.at("data_bytes").get<std::uint64_t>();
    if (bytes.size() - data_start != data_bytes)
      throw CheckpointError(Kind::kTruncated, "checkpoint holds " + std::to_string(bytes.size() - data_start) +
                                                  " tensor bytes, header declares " + std::to_string(data_bytes));

    std::map<std::string, nlohmann::json> table;
    for (const auto& t : header.at("tensors")) table[t.at("name").get<std::string>()] = t;
    std::size_t seen = 0;
    detail::visit_checkpoint_tensors(ck, [&](const std::string& name, nn::Mat<float>& m) {
      const auto it = table.find(name);
      if (it == table.end()) throw CheckpointError(Kind::kShape, "checkpoint is missing tensor " + name);
      const auto& shape = it->second.at("shape");
      if (shape.size() != 2 || shape[0].get<Eigen::Index>() != m.rows() || shape[1].get<Eigen::Index>() != m.cols())
        throw CheckpointError(Kind::kShape, "tensor " + name + " has shape " + shape.dump() + ", config implies [" +
                                                std::to_string(m.rows()) + "," + std::to_string(m.cols()) + "]");
      const std::uint64_t off = it->second.at("offset").get<std::uint64_t>();
      const std::uint64_t len = static_cast<std::uint64_t>(m.size()) * 4;
      if (off + len > data_bytes) throw CheckpointError(Kind::kTruncated, "tensor " + name + " runs past the data");
      const auto* src = raw + data_start + off;
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<float>(detail::get_u32(src + 4 * i));
      ++seen;
    });
    if (seen != table.size()) throw CheckpointError(Kind::kShape, "checkpoint has tensors the config does not use");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kFormat, std::string("malformed checkpoint header: ") + e.what());
  } catch (const ParameterError& e) {
    throw CheckpointError(Kind::kFormat, std::string("invalid model config in checkpoint: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace difftx
