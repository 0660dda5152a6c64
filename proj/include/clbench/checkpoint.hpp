#pragma once

// Versioned binary checkpoint:
//
//   "CLBENCH\0"  magic (8 bytes)
//   u32          format version
//   u32          scalar width in bytes (4 or 8)
//   u64 + bytes  JSON header: model config, vocabulary, class names, metadata
//   u32          tensor count
//   per tensor:  u32 name length, name bytes, u32 rows, u32 cols,
//                rows*cols little-endian scalars, row-major
//
// Loading and saving again reproduces the file byte for byte.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clbench/encoder.hpp"
#include "clbench/tokenizer.hpp"

namespace clbench {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::array<char, 8> kCheckpointMagic{'C', 'L', 'B', 'E', 'N', 'C', 'H', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"max_len", c.max_len},     {"hidden", c.hidden},
       {"layers", c.layers},         {"heads", c.heads},         {"ffn", c.ffn},
       {"keep_prob", c.keep_prob},   {"trim_padding", c.trim_padding}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_len").get_to(c.max_len);
  j.at("hidden").get_to(c.hidden);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("ffn").get_to(c.ffn);
  j.at("keep_prob").get_to(c.keep_prob);
  j.at("trim_padding").get_to(c.trim_padding);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"encoder", c.encoder},
       {"classes", c.classes},
       {"projection_dim", c.projection_dim},
       {"with_weighting", c.with_weighting},
       {"weighting", c.weighting}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("encoder").get_to(c.encoder);
  j.at("classes").get_to(c.classes);
  j.at("projection_dim").get_to(c.projection_dim);
  j.at("with_weighting").get_to(c.with_weighting);
  j.at("weighting").get_to(c.weighting);
}

template <std::floating_point T>
struct Checkpoint {
  Model<T> model;
  Vocabulary vocab;
  std::vector<std::string> classes;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

template <class V>
void write_pod(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V read_pod(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw CheckpointError("checkpoint: truncated file");
  return v;
}

inline std::string read_bytes(std::istream& in, std::size_t n) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw CheckpointError("checkpoint: truncated file");
  return s;
}

}  // namespace detail

template <std::floating_point T>
void save_checkpoint(std::ostream& out, const Model<T>& model, const Vocabulary& vocab,
                     const std::vector<std::string>& classes,
                     const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json header = {{"model", model.config()},
                           {"vocabulary", vocab.tokens()},
                           {"classes", classes},
                           {"metadata", metadata}};
  const std::string text = header.dump();
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::write_pod<std::uint32_t>(out, kCheckpointVersion);
  detail::write_pod<std::uint32_t>(out, sizeof(T));
  detail::write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = model.parameters();
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rows()));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.cols()));
    out.write(reinterpret_cast<const char*>(p.tensor.values().data()),
              static_cast<std::streamsize>(p.tensor.size() * sizeof(T)));
  }
  if (!out) throw CheckpointError("checkpoint: write failed");
}

template <std::floating_point T>
void save_checkpoint(const std::string& path, const Model<T>& model, const Vocabulary& vocab,
                     const std::vector<std::string>& classes,
                     const nlohmann::json& metadata = nlohmann::json::object()) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
  save_checkpoint(out, model, vocab, classes, metadata);
}

template <std::floating_point T>
void save_checkpoint(std::ostream& out, const Checkpoint<T>& ckpt) {
  save_checkpoint(out, ckpt.model, ckpt.vocab, ckpt.classes, ckpt.metadata);
}

template <std::floating_point T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  save_checkpoint(path, ckpt.model, ckpt.vocab, ckpt.classes, ckpt.metadata);
}

/// Reads a checkpoint stored at either precision; values are converted to T.
template <std::floating_point T>
Checkpoint<T> load_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCheckpointMagic) throw CheckpointError("checkpoint: bad magic");
  const auto version = detail::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const auto width = detail::read_pod<std::uint32_t>(in);
  if (width != 4 && width != 8) throw CheckpointError("checkpoint: bad scalar width " + std::to_string(width));
  const auto header_len = detail::read_pod<std::uint64_t>(in);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(detail::read_bytes(in, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad header: ") + e.what());
  }

  Checkpoint<T> ckpt;
  auto config = header.at("model").get<ModelConfig>();
  ckpt.vocab = Vocabulary::from_tokens(header.at("vocabulary").get<std::vector<std::string>>());
  ckpt.classes = header.at("classes").get<std::vector<std::string>>();
  ckpt.metadata = header.at("metadata");
  Rng scratch(0);
  ckpt.model = Model<T>(config, scratch);

  auto params = ckpt.model.parameters();
  const auto count = detail::read_pod<std::uint32_t>(in);
  if (count != params.size())
    throw CheckpointError("checkpoint: " + std::to_string(count) + " tensors, model expects " +
                          std::to_string(params.size()));
  for (auto& p : params) {
    const auto name = detail::read_bytes(in, detail::read_pod<std::uint32_t>(in));
    if (name != p.name) throw CheckpointError("checkpoint: expected tensor " + p.name + ", found " + name);
    const auto rows = detail::read_pod<std::uint32_t>(in);
    const auto cols = detail::read_pod<std::uint32_t>(in);
    if (rows != p.tensor.rows() || cols != p.tensor.cols())
      throw CheckpointError("checkpoint: shape mismatch for " + name);
    auto dst = p.tensor.mutable_values();
    for (auto& v : dst) v = width == 4 ? static_cast<T>(detail::read_pod<float>(in)) : static_cast<T>(detail::read_pod<double>(in));
  }
  return ckpt;
}

template <std::floating_point T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path);
  return load_checkpoint<T>(in);
}

}  // namespace clbench
