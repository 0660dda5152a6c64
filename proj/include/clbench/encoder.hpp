#pragma once

// Tiny pre-LN transformer encoder with [CLS] pooling, plus the heads that sit
// on top of it: softmax classifier, two-layer projection, and the auxiliary
// weighting network used by the label-aware objectives.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "clbench/autodiff.hpp"
#include "clbench/rng.hpp"
#include "clbench/tokenizer.hpp"

namespace clbench {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t max_len = kDefaultMaxLen;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  double keep_prob = 0.9;
  /// Drop trailing [PAD] positions before the forward pass. Padding is masked
  /// either way, so results are unchanged; this only saves work.
  bool trim_padding = true;

  void validate() const {
    if (vocab_size <= Vocabulary::kSpecialCount) throw std::invalid_argument("encoder: vocabulary too small");
    if (max_len < 3) throw std::invalid_argument("encoder: max_len must be at least 3");
    if (hidden == 0 || layers == 0 || heads == 0 || ffn == 0)
      throw std::invalid_argument("encoder: dimensions must be positive");
    if (hidden % heads != 0)
      throw std::invalid_argument("encoder: hidden size " + std::to_string(hidden) + " not divisible by " +
                                  std::to_string(heads) + " heads");
    if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw std::invalid_argument("encoder: keep_prob must be in (0, 1]");
  }
};

template <std::floating_point T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <std::floating_point T>
using ParameterList = std::vector<NamedTensor<T>>;

namespace init {

template <std::floating_point T>
Tensor<T> uniform_fan_in(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(rows, cols, std::move(v));
}

template <std::floating_point T>
Tensor<T> normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>::parameter(rows, cols, std::move(v));
}

template <std::floating_point T>
Tensor<T> filled(std::size_t rows, std::size_t cols, T value) {
  return Tensor<T>::parameter(rows, cols, std::vector<T>(rows * cols, value));
}

}  // namespace init

/// Final-layer token states H (seq_len x hidden) and the pooled [CLS] row.
template <std::floating_point T>
struct EncoderOutput {
  Tensor<T> hidden;
  Tensor<T> cls;
};

template <std::floating_point T>
struct TransformerLayer {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> ff1, ff1_bias, ff2, ff2_bias;
};

template <std::floating_point T>
class Encoder {
 public:
  Encoder() = default;

  Encoder(EncoderConfig config, Rng& rng) : config_(std::move(config)) {
    config_.validate();
    const std::size_t d = config_.hidden;
    embedding_ = init::normal<T>(config_.vocab_size, d, 0.02, rng);
    positions_ = init::normal<T>(config_.max_len, d, 0.02, rng);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      TransformerLayer<T> layer;
      layer.ln1_gain = init::filled<T>(1, d, T(1));
      layer.ln1_bias = init::filled<T>(1, d, T(0));
      layer.wq = init::uniform_fan_in<T>(d, d, d, rng);
      layer.wk = init::uniform_fan_in<T>(d, d, d, rng);
      layer.wv = init::uniform_fan_in<T>(d, d, d, rng);
      layer.wo = init::uniform_fan_in<T>(d, d, d, rng);
      layer.ln2_gain = init::filled<T>(1, d, T(1));
      layer.ln2_bias = init::filled<T>(1, d, T(0));
      layer.ff1 = init::uniform_fan_in<T>(config_.ffn, d, d, rng);
      layer.ff1_bias = init::filled<T>(1, config_.ffn, T(0));
      layer.ff2 = init::uniform_fan_in<T>(d, config_.ffn, config_.ffn, rng);
      layer.ff2_bias = init::filled<T>(1, d, T(0));
      layers_.push_back(std::move(layer));
    }
    final_gain_ = init::filled<T>(1, d, T(1));
    final_bias_ = init::filled<T>(1, d, T(0));
  }

  const EncoderConfig& config() const { return config_; }
  std::size_t hidden() const { return config_.hidden; }
  const Tensor<T>& embedding() const { return embedding_; }
  Tensor<T>& embedding() { return embedding_; }

  /// Encodes one id sequence. `embedding_table`, when given, replaces the
  /// word-embedding matrix for this pass (it must have the same shape).
  EncoderOutput<T> encode(std::span<const TokenId> ids, bool dropout_on, Rng& rng,
                          const Tensor<T>* embedding_table = nullptr) const {
    if (ids.empty()) throw std::invalid_argument("encode: empty sequence");
    if (ids.size() > config_.max_len)
      throw std::invalid_argument("encode: sequence length " + std::to_string(ids.size()) + " exceeds maximum " +
                                  std::to_string(config_.max_len));
    for (auto id : ids)
      if (id >= config_.vocab_size)
        throw std::out_of_range("encode: token id " + std::to_string(id) + " outside vocabulary of size " +
                                std::to_string(config_.vocab_size));
    const Tensor<T>& table = embedding_table ? *embedding_table : embedding_;
    if (table.shape() != embedding_.shape()) detail::shape_mismatch("encode", embedding_, table);

    std::size_t len = ids.size();
    if (config_.trim_padding) len = std::max<std::size_t>(1, content_length(ids));
    auto seq = ids.first(len);
    std::vector<std::size_t> positions(len);
    for (std::size_t i = 0; i < len; ++i) positions[i] = i;

    RowMask mask(len * len);
    for (std::size_t q = 0; q < len; ++q)
      for (std::size_t k = 0; k < len; ++k) mask[q * len + k] = seq[k] != Vocabulary::kPad;

    const double keep = dropout_on ? config_.keep_prob : 1.0;
    auto x = add(gather_rows(table, seq), gather_rows(positions_, std::span<const std::size_t>(positions)));
    x = dropout(x, keep, rng);
    for (const auto& layer : layers_) x = layer_forward(layer, x, mask, keep, rng);
    auto hidden = layer_norm_rows(x, final_gain_, final_bias_);
    auto cls = slice_rows(hidden, 0, 1);
    return {std::move(hidden), std::move(cls)};
  }

  std::vector<EncoderOutput<T>> encode(std::span<const TokenIds> batch, bool dropout_on, Rng& rng,
                                       const Tensor<T>* embedding_table = nullptr) const {
    if (batch.empty()) throw std::invalid_argument("encode: empty batch");
    std::vector<EncoderOutput<T>> out;
    out.reserve(batch.size());
    for (const auto& ids : batch) out.push_back(encode(ids, dropout_on, rng, embedding_table));
    return out;
  }

  ParameterList<T> parameters(const std::string& prefix = "encoder.") const {
    ParameterList<T> out{{prefix + "embedding", embedding_}, {prefix + "positions", positions_}};
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const std::string p = prefix + "layer" + std::to_string(l) + ".";
      out.insert(out.end(), {{p + "ln1_gain", L.ln1_gain},
                             {p + "ln1_bias", L.ln1_bias},
                             {p + "wq", L.wq},
                             {p + "wk", L.wk},
                             {p + "wv", L.wv},
                             {p + "wo", L.wo},
                             {p + "ln2_gain", L.ln2_gain},
                             {p + "ln2_bias", L.ln2_bias},
                             {p + "ff1", L.ff1},
                             {p + "ff1_bias", L.ff1_bias},
                             {p + "ff2", L.ff2},
                             {p + "ff2_bias", L.ff2_bias}});
    }
    out.push_back({prefix + "final_gain", final_gain_});
    out.push_back({prefix + "final_bias", final_bias_});
    return out;
  }

 private:
  Tensor<T> layer_forward(const TransformerLayer<T>& L, const Tensor<T>& x, const RowMask& mask, double keep,
                          Rng& rng) const {
    const std::size_t heads = config_.heads;
    const std::size_t dk = config_.hidden / heads;
    const T inv_sqrt_dk = T(1) / std::sqrt(T(dk));

    auto a = layer_norm_rows(x, L.ln1_gain, L.ln1_bias);
    auto q = matmul_nt(a, L.wq);
    auto k = matmul_nt(a, L.wk);
    auto v = matmul_nt(a, L.wv);
    std::vector<Tensor<T>> contexts;
    contexts.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = slice_cols(q, h * dk, dk);
      auto kh = slice_cols(k, h * dk, dk);
      auto vh = slice_cols(v, h * dk, dk);
      auto attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt_dk), &mask);
      contexts.push_back(matmul(attn, vh));
    }
    auto context = heads == 1 ? contexts.front() : concat_cols<T>(contexts);
    auto y = add(x, dropout(matmul_nt(context, L.wo), keep, rng));

    auto b = layer_norm_rows(y, L.ln2_gain, L.ln2_bias);
    auto f = gelu(add_row(matmul_nt(b, L.ff1), L.ff1_bias));
    f = add_row(matmul_nt(f, L.ff2), L.ff2_bias);
    return add(y, dropout(f, keep, rng));
  }

  EncoderConfig config_;
  Tensor<T> embedding_;
  Tensor<T> positions_;
  std::vector<TransformerLayer<T>> layers_;
  Tensor<T> final_gain_, final_bias_;
};

/// Stacks the [CLS] rows of a batch into an (N x hidden) matrix.
template <std::floating_point T>
Tensor<T> stack_cls(std::span<const EncoderOutput<T>> outputs) {
  std::vector<Tensor<T>> rows;
  rows.reserve(outputs.size());
  for (const auto& o : outputs) rows.push_back(o.cls);
  return concat_rows<T>(rows);
}

/// Softmax classifier over pooled representations: p = softmax(W h).
template <std::floating_point T>
struct ClassifierHead {
  Tensor<T> weight;  // classes x hidden

  ClassifierHead() = default;
  ClassifierHead(std::size_t classes, std::size_t hidden, Rng& rng)
      : weight(init::uniform_fan_in<T>(classes, hidden, hidden, rng)) {}

  std::size_t classes() const { return weight.rows(); }

  Tensor<T> logits(const Tensor<T>& h) const { return matmul_nt(h, weight); }
  Tensor<T> classify(const Tensor<T>& h) const { return softmax_rows(logits(h)); }
};

/// z = W2 relu(W1 h).
template <std::floating_point T>
struct ProjectionHead {
  Tensor<T> w1;  // proj x hidden
  Tensor<T> w2;  // proj x proj

  ProjectionHead() = default;
  ProjectionHead(std::size_t hidden, std::size_t proj, Rng& rng)
      : w1(init::uniform_fan_in<T>(proj, hidden, hidden, rng)), w2(init::uniform_fan_in<T>(proj, proj, proj, rng)) {}

  Tensor<T> project(const Tensor<T>& h) const { return matmul_nt(relu(matmul_nt(h, w1)), w2); }
};

/// Auxiliary network with its own encoder and classifier; its softmax output
/// gives the per-class confidence weights of the label-aware loss.
template <std::floating_point T>
struct WeightingNet {
  Encoder<T> encoder;
  ClassifierHead<T> head;

  WeightingNet() = default;
  WeightingNet(EncoderConfig config, std::size_t classes, Rng& rng)
      : encoder(std::move(config), rng), head(classes, encoder.hidden(), rng) {}

  Tensor<T> logits(std::span<const TokenIds> batch, bool dropout_on, Rng& rng) const {
    auto outs = encoder.encode(batch, dropout_on, rng);
    return head.logits(stack_cls<T>(outs));
  }

  /// (batch x classes) row-stochastic confidence matrix.
  Tensor<T> confidence(std::span<const TokenIds> batch, bool dropout_on, Rng& rng) const {
    return softmax_rows(logits(batch, dropout_on, rng));
  }

  ParameterList<T> parameters() const {
    auto out = encoder.parameters("weighting.encoder.");
    out.push_back({"weighting.classifier", head.weight});
    return out;
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t classes = 2;
  std::size_t projection_dim = 64;
  bool with_weighting = false;
  EncoderConfig weighting;

  /// Same family as the main encoder at half width (at least one head's worth).
  static EncoderConfig default_weighting(const EncoderConfig& main) {
    EncoderConfig w = main;
    w.hidden = std::max(main.heads, main.hidden / 2 / main.heads * main.heads);
    w.ffn = std::max<std::size_t>(1, main.ffn / 2);
    w.layers = std::max<std::size_t>(1, main.layers / 2);
    return w;
  }
};

template <std::floating_point T>
class Model {
 public:
  Model() = default;

  Model(ModelConfig config, Rng& rng) : config_(std::move(config)) {
    if (config_.classes < 2) throw std::invalid_argument("model: need at least two classes");
    encoder_ = Encoder<T>(config_.encoder, rng);
    classifier_ = ClassifierHead<T>(config_.classes, config_.encoder.hidden, rng);
    projection_ = ProjectionHead<T>(config_.encoder.hidden, config_.projection_dim, rng);
    if (config_.with_weighting) weighting_.emplace(config_.weighting, config_.classes, rng);
  }

  const ModelConfig& config() const { return config_; }
  const Encoder<T>& encoder() const { return encoder_; }
  Encoder<T>& encoder() { return encoder_; }
  const ClassifierHead<T>& classifier() const { return classifier_; }
  ClassifierHead<T>& classifier() { return classifier_; }
  const ProjectionHead<T>& projection() const { return projection_; }
  ProjectionHead<T>& projection() { return projection_; }
  bool has_weighting() const { return weighting_.has_value(); }
  const WeightingNet<T>& weighting() const {
    if (!weighting_) throw std::logic_error("model has no weighting network");
    return *weighting_;
  }

  ParameterList<T> parameters() const {
    auto out = encoder_.parameters();
    out.push_back({"classifier", classifier_.weight});
    out.push_back({"projection.w1", projection_.w1});
    out.push_back({"projection.w2", projection_.w2});
    if (weighting_) {
      auto w = weighting_->parameters();
      out.insert(out.end(), w.begin(), w.end());
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  /// Deep copy of all parameter values, in parameters() order.
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    for (const auto& p : parameters()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    return out;
  }

  void restore(const std::vector<std::vector<T>>& values) {
    auto params = parameters();
    if (values.size() != params.size()) throw std::invalid_argument("restore: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto dst = params[i].tensor.mutable_values();
      if (dst.size() != values[i].size())
        throw std::invalid_argument("restore: size mismatch for " + params[i].name);
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

 private:
  ModelConfig config_;
  Encoder<T> encoder_;
  ClassifierHead<T> classifier_;
  ProjectionHead<T> projection_;
  std::optional<WeightingNet<T>> weighting_;
};

}  // namespace clbench
