#pragma once

// Positive-view construction: a second dropout pass, FGSM on the word
// embedding matrix, and FGSM on the pooled representations.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clbench/autodiff.hpp"
#include "clbench/diag.hpp"
#include "clbench/encoder.hpp"
#include "clbench/objectives.hpp"

namespace clbench {

enum class PerturbationTarget { EmbeddingMatrix, TokenRepresentations };

/// r has the shape of its target. For TokenRepresentations each row is
/// normalized independently; `zero_rows[i]` marks rows whose source gradient
/// vanished (those rows of r are 0). EmbeddingMatrix uses a single global
/// normalization and a single flag.
template <std::floating_point T>
struct Perturbation {
  PerturbationTarget target = PerturbationTarget::EmbeddingMatrix;
  Tensor<T> r;
  double epsilon = 0.0;
  std::vector<bool> zero_rows;
};

namespace detail {

inline void check_epsilon(const char* op, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument(std::string(op) + ": epsilon must be > 0");
}

/// Writes -eps * g / ||g|| (or +eps for the ascent reading) into out.
/// Returns false and writes zeros when g == 0.
template <std::floating_point T>
bool normalized_step(std::span<const T> g, double epsilon, FgsmSign sign, std::span<T> out) {
  double sq = 0.0;
  for (T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm == 0.0) {
    std::fill(out.begin(), out.end(), T(0));
    return false;
  }
  const double factor = (sign == FgsmSign::Printed ? -epsilon : epsilon) / norm;
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = static_cast<T>(factor * static_cast<double>(g[i]));
  return true;
}

}  // namespace detail

/// FGSM step on a flat gradient: r = -eps * g / ||g||_2 (single normalization).
template <std::floating_point T>
std::vector<T> fgsm_direction(std::span<const T> gradient, double epsilon, FgsmSign sign = FgsmSign::Printed) {
  detail::check_epsilon("fgsm", epsilon);
  std::vector<T> r(gradient.size());
  detail::normalized_step<T>(gradient, epsilon, sign, r);
  return r;
}

/// Re-encodes the batch with a fresh dropout mask. The views share labels with
/// their originals by position.
template <std::floating_point T>
std::vector<EncoderOutput<T>> dropout_view(const Encoder<T>& encoder, std::span<const TokenIds> batch, Rng& rng) {
  if (encoder.config().keep_prob == 1.0) diag::warn("dropout_view: keep probability is 1.0, views will be identical");
  return encoder.encode(batch, true, rng);
}

/// Global-norm perturbation of the word embedding matrix from d(loss)/dV.
template <std::floating_point T>
Perturbation<T> embedding_perturbation(const Encoder<T>& encoder, const Tensor<T>& loss, double epsilon,
                                       FgsmSign sign = FgsmSign::Printed) {
  detail::check_epsilon("fgsm_embedding", epsilon);
  auto g = grad_wrt(loss, encoder.embedding());
  std::vector<T> r(g.size());
  const bool nonzero = detail::normalized_step<T>(g.values(), epsilon, sign, r);
  if (!nonzero) diag::warn("fgsm_embedding: zero gradient, perturbation is zero");
  Perturbation<T> p;
  p.target = PerturbationTarget::EmbeddingMatrix;
  p.r = Tensor<T>::constant(g.rows(), g.cols(), std::move(r));
  p.epsilon = epsilon;
  p.zero_rows = {!nonzero};
  return p;
}

/// Encodes the batch through f^{V+r}. The stored embedding matrix is never
/// written; V + r is a separate graph node whose gradient flows back into V.
template <std::floating_point T>
std::vector<EncoderOutput<T>> encode_perturbed(const Encoder<T>& encoder, std::span<const TokenIds> batch,
                                               const Perturbation<T>& perturbation, bool dropout_on, Rng& rng) {
  if (perturbation.target != PerturbationTarget::EmbeddingMatrix)
    throw std::invalid_argument("encode_perturbed: perturbation does not target the embedding matrix");
  auto table = add(encoder.embedding(), perturbation.r);
  return encoder.encode(batch, dropout_on, rng, &table);
}

template <std::floating_point T>
struct EmbeddingAttack {
  Perturbation<T> perturbation;
  std::vector<EncoderOutput<T>> outputs;
};

/// CAT positive views: r from the gradient of `loss` (the clean CE) w.r.t.
/// V, then the batch re-encoded with V + r.
template <std::floating_point T>
EmbeddingAttack<T> fgsm_embedding(const Encoder<T>& encoder, std::span<const TokenIds> batch, const Tensor<T>& loss,
                                  double epsilon, Rng& rng, bool dropout_on = true,
                                  FgsmSign sign = FgsmSign::Printed) {
  EmbeddingAttack<T> attack;
  attack.perturbation = embedding_perturbation(encoder, loss, epsilon, sign);
  attack.outputs = encode_perturbed(encoder, batch, attack.perturbation, dropout_on, rng);
  return attack;
}

/// Per-row perturbation of the pooled representations h (N x d) from d(loss)/dh.
template <std::floating_point T>
Perturbation<T> token_perturbation(const Tensor<T>& h, const Tensor<T>& loss, double epsilon,
                                   FgsmSign sign = FgsmSign::Printed) {
  detail::check_epsilon("fgsm_token", epsilon);
  auto g = grad_wrt(loss, h);
  const std::size_t n = h.rows(), d = h.cols();
  std::vector<T> r(n * d);
  Perturbation<T> p;
  p.target = PerturbationTarget::TokenRepresentations;
  p.epsilon = epsilon;
  p.zero_rows.assign(n, false);
  auto gv = g.values();
  for (std::size_t i = 0; i < n; ++i) {
    const bool nonzero =
        detail::normalized_step<T>(gv.subspan(i * d, d), epsilon, sign, std::span<T>(r).subspan(i * d, d));
    p.zero_rows[i] = !nonzero;
  }
  p.r = Tensor<T>::constant(n, d, std::move(r));
  return p;
}

/// h_j = h_i + r; r is a constant, so gradients flow through h_i only.
template <std::floating_point T>
Tensor<T> apply_token_perturbation(const Tensor<T>& h, const Perturbation<T>& perturbation) {
  if (perturbation.target != PerturbationTarget::TokenRepresentations)
    throw std::invalid_argument("apply_token_perturbation: perturbation does not target token representations");
  return add(h, perturbation.r);
}

template <std::floating_point T>
struct TokenAttack {
  Perturbation<T> perturbation;
  Tensor<T> perturbed;
};

/// TACT positive views. No parameter is touched.
template <std::floating_point T>
TokenAttack<T> fgsm_token(const Tensor<T>& h, const Tensor<T>& loss, double epsilon,
                          FgsmSign sign = FgsmSign::Printed) {
  TokenAttack<T> attack;
  attack.perturbation = token_perturbation(h, loss, epsilon, sign);
  attack.perturbed = apply_token_perturbation(h, attack.perturbation);
  return attack;
}

}  // namespace clbench
