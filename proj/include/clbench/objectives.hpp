#pragma once

// Classification and contrastive losses, and the per-method mixing of them
// into a single training objective.
//
// Contrastive losses operate on a (2N x d) representation matrix: N
// originals followed by their N augmented views. sim(.,.) is cosine
// similarity; every log-ratio is evaluated as a masked log-softmax over
// k != i, so all exp arguments are max-shifted per anchor.

#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "clbench/autodiff.hpp"

namespace clbench {

enum class Method { CE, SCL, CAT, TACT, LCL, TLCL };

inline constexpr std::array<Method, 6> kAllMethods{Method::CE,   Method::SCL, Method::CAT,
                                                    Method::TACT, Method::LCL, Method::TLCL};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::CE: return "CE";
    case Method::SCL: return "SCL";
    case Method::CAT: return "CAT";
    case Method::TACT: return "TACT";
    case Method::LCL: return "LCL";
    case Method::TLCL: return "TLCL";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view name) {
  for (auto m : kAllMethods) {
    auto canonical = method_name(m);
    if (canonical.size() != name.size()) continue;
    bool same = true;
    for (std::size_t i = 0; i < name.size(); ++i)
      same = same && std::toupper(static_cast<unsigned char>(name[i])) == canonical[i];
    if (same) return m;
  }
  return std::nullopt;
}

inline std::string method_list() { return "ce, scl, cat, tact, lcl, tlcl"; }

inline bool is_contrastive(Method m) { return m != Method::CE; }
inline bool is_adversarial(Method m) { return m == Method::CAT || m == Method::TACT || m == Method::TLCL; }
inline bool uses_weighting(Method m) { return m == Method::LCL || m == Method::TLCL; }
inline bool uses_dropout_view(Method m) { return m == Method::SCL || m == Method::LCL; }

/// Printed = r along the negative normalized gradient; Ascent = along the
/// positive gradient (loss-maximizing reading).
enum class FgsmSign { Printed, Ascent };
enum class InfoNceDirection { Both, Single };
enum class ContrastReduction { Sum, Mean };

struct ObjectiveConfig {
  Method method = Method::CE;
  double lambda = 0.5;
  double tau = 0.3;
  double epsilon = 0.01;
  FgsmSign sign = FgsmSign::Printed;
  InfoNceDirection infonce_direction = InfoNceDirection::Both;
  /// How the trainer scales the anchor-summed NTXent / label-aware loss
  /// before mixing: Sum keeps the raw sum, Mean divides by 2N.
  ContrastReduction reduction = ContrastReduction::Mean;
  /// TLCL: feed the adversarial representation to the weighting net instead of the clean input.
  bool weighting_sees_adversarial = false;
  /// Pass representations through the projection head for SCL/LCL/TLCL as well.
  bool project_all = false;

  void validate() const {
    if (!(tau > 0.0)) throw std::invalid_argument("objective: tau must be > 0");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("objective: lambda must be in [0, 1]");
    if (is_adversarial(method) && !(epsilon > 0.0))
      throw std::invalid_argument("objective: epsilon must be > 0 for adversarial methods");
  }
};

namespace detail {

inline void check_labels(const char* op, std::size_t rows, std::span<const int> labels) {
  if (labels.size() != rows)
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                     " rows");
}

inline void check_contrast(const char* op, std::size_t rows, double tau) {
  if (rows < 2) throw std::invalid_argument(std::string(op) + ": need at least 2 rows");
  if (!(tau > 0.0)) throw std::invalid_argument(std::string(op) + ": tau must be > 0");
}

template <std::floating_point T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t classes) {
  std::vector<T> v(labels.size() * classes, T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw std::out_of_range("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    v[i * classes + static_cast<std::size_t>(labels[i])] = T(1);
  }
  return Tensor<T>::constant(labels.size(), classes, std::move(v));
}

inline RowMask off_diagonal(std::size_t n) {
  RowMask mask(n * n, 1);
  for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = 0;
  return mask;
}

/// Coefficient matrix C with C[i][j] = -1/|P_i| for j in P_i, so that
/// sum(C * log_softmax) is the anchor-summed supervised contrastive loss.
/// Anchors with empty P_i get an all-zero row.
template <std::floating_point T>
Tensor<T> positive_coefficients(std::span<const int> labels) {
  const std::size_t n = labels.size();
  std::vector<T> c(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j) count += (j != i && labels[j] == labels[i]);
    if (count == 0) continue;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && labels[j] == labels[i]) c[i * n + j] = T(-1) / T(count);
  }
  return Tensor<T>::constant(n, n, std::move(c));
}

/// sum_i -1/|P_i| sum_{j in P_i} log softmax_{k != i}(logits[i])[j]
template <std::floating_point T>
Tensor<T> supervised_contrast(const Tensor<T>& logits, std::span<const int> labels) {
  const auto mask = off_diagonal(labels.size());
  return sum(mul(log_softmax_rows(logits, &mask), positive_coefficients<T>(labels)));
}

template <std::floating_point T>
Tensor<T> scaled_similarity(const Tensor<T>& reps, double tau) {
  return scale(cosine_similarity(reps), T(1.0 / tau));
}

}  // namespace detail

/// Representations ordered as N originals then N views, with view labels
/// inherited from their originals.
template <std::floating_point T>
struct ContrastBatch {
  Tensor<T> representations;
  std::vector<int> labels;

  static ContrastBatch make(const Tensor<T>& originals, const Tensor<T>& views, std::span<const int> labels) {
    if (originals.shape() != views.shape()) detail::shape_mismatch("contrast_batch", originals, views);
    detail::check_labels("contrast_batch", originals.rows(), labels);
    ContrastBatch b;
    b.representations = concat_rows<T>({originals, views});
    b.labels.assign(labels.begin(), labels.end());
    b.labels.insert(b.labels.end(), labels.begin(), labels.end());
    return b;
  }

  std::size_t size() const { return labels.size(); }
};

// ---------------------------------------------------------------------------

/// Mean negative log-probability of the true class. Probabilities are floored
/// at `floor` so a zero at the true class yields a large finite loss.
template <std::floating_point T>
Tensor<T> cross_entropy(const Tensor<T>& probs, std::span<const int> labels, T floor = T(1e-12)) {
  detail::check_labels("cross_entropy", probs.rows(), labels);
  auto onehot = detail::one_hot<T>(labels, probs.cols());
  return scale(sum(mul(log(clamp_min(probs, floor)), onehot)), T(-1) / T(labels.size()));
}

/// Same quantity computed from logits via log-softmax.
template <std::floating_point T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, std::span<const int> labels) {
  detail::check_labels("cross_entropy", logits.rows(), labels);
  auto onehot = detail::one_hot<T>(labels, logits.cols());
  return scale(sum(mul(log_softmax_rows(logits), onehot)), T(-1) / T(labels.size()));
}

/// Supervised NTXent, summed over all anchors.
template <std::floating_point T>
Tensor<T> ntxent(const Tensor<T>& reps, std::span<const int> labels, double tau) {
  detail::check_contrast("ntxent", reps.rows(), tau);
  detail::check_labels("ntxent", reps.rows(), labels);
  return detail::supervised_contrast(detail::scaled_similarity(reps, tau), labels);
}

template <std::floating_point T>
Tensor<T> ntxent(const ContrastBatch<T>& batch, double tau) {
  return ntxent(batch.representations, batch.labels, tau);
}

/// InfoNCE with the single positive of row i at row (i + N) mod 2N, averaged
/// over anchors. Single direction uses only the first N rows as anchors.
template <std::floating_point T>
Tensor<T> infonce(const Tensor<T>& z, double tau, InfoNceDirection direction = InfoNceDirection::Both) {
  detail::check_contrast("infonce", z.rows(), tau);
  if (z.rows() % 2 != 0) throw ShapeError("infonce: row count must be even, got " + z.shape_string());
  const std::size_t n2 = z.rows(), n = n2 / 2;
  const std::size_t anchors = direction == InfoNceDirection::Both ? n2 : n;
  std::vector<T> c(n2 * n2, T(0));
  for (std::size_t i = 0; i < anchors; ++i) c[i * n2 + (i + n) % n2] = T(-1) / T(anchors);
  const auto mask = detail::off_diagonal(n2);
  auto ls = log_softmax_rows(detail::scaled_similarity(z, tau), &mask);
  return sum(mul(ls, Tensor<T>::constant(n2, n2, std::move(c))));
}

/// Label-aware NTXent: each anchor's terms are reweighted by the weighting
/// network's confidence w[i][y_k] in the class of every candidate k.
/// Computed as the NTXent kernel on sim/tau + log w[i][y_k] - log w[i][y_i];
/// the positive terms' weight offsets are exactly zero, and uniform weights
/// reproduce ntxent bit for bit.
template <std::floating_point T>
Tensor<T> lcl_loss(const Tensor<T>& reps, std::span<const int> labels, const Tensor<T>& weights, double tau) {
  detail::check_contrast("lcl_loss", reps.rows(), tau);
  detail::check_labels("lcl_loss", reps.rows(), labels);
  if (weights.rows() != reps.rows()) detail::shape_mismatch("lcl_loss", reps, weights);
  for (T w : weights.values())
    if (!(w > T(0))) throw std::invalid_argument("lcl_loss: weights must be strictly positive");
  const std::size_t n = reps.rows();
  auto onehot = detail::one_hot<T>(labels, weights.cols());
  auto log_w = log(weights);
  auto by_candidate = matmul_nt(log_w, onehot);  // log w[i][y_k]
  auto own = matmul(mul(log_w, onehot), Tensor<T>::constant(weights.cols(), n,
                                                            std::vector<T>(weights.cols() * n, T(1))));  // log w[i][y_i]
  auto offsets = sub(by_candidate, own);
  return detail::supervised_contrast(add(detail::scaled_similarity(reps, tau), offsets), labels);
}

template <std::floating_point T>
Tensor<T> lcl_loss(const ContrastBatch<T>& batch, const Tensor<T>& weights, double tau) {
  return lcl_loss(batch.representations, batch.labels, weights, tau);
}

// ---------------------------------------------------------------------------

/// Constituent losses of a final objective; which ones are required depends on the method.
template <std::floating_point T>
struct LossTerms {
  std::optional<Tensor<T>> ce;            // main classifier, clean input
  std::optional<Tensor<T>> ce_perturbed;  // main classifier, adversarial view
  std::optional<Tensor<T>> ntxent;
  std::optional<Tensor<T>> infonce;
  std::optional<Tensor<T>> lcl;
  std::optional<Tensor<T>> ce_weighting;  // weighting network
};

/// Mixes constituent losses:
///   SCL        (1-l) CE + l NTX
///   CAT, TACT  (1-l)/2 (CE + CE_adv) + l InfoNCE
///   LCL, TLCL  (1-l) (CE + CE_w) + l L_f
/// With lambda == 0 the contrastive constituent is not needed.
template <std::floating_point T>
Tensor<T> combine(Method method, const LossTerms<T>& terms, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("combine: lambda must be in [0, 1]");
  auto need = [method](const std::optional<Tensor<T>>& t, const char* what) -> const Tensor<T>& {
    if (!t) throw std::invalid_argument("combine: " + std::string(method_name(method)) + " requires " + what);
    return *t;
  };
  const T l = T(lambda);
  const T keep = T(1) - l;
  switch (method) {
    case Method::CE: return need(terms.ce, "ce");
    case Method::SCL: {
      auto out = scale(need(terms.ce, "ce"), keep);
      if (lambda == 0.0) return out;
      return add(out, scale(need(terms.ntxent, "ntxent"), l));
    }
    case Method::CAT:
    case Method::TACT: {
      auto out = scale(add(need(terms.ce, "ce"), need(terms.ce_perturbed, "ce_perturbed")), keep / T(2));
      if (lambda == 0.0) return out;
      return add(out, scale(need(terms.infonce, "infonce"), l));
    }
    case Method::LCL:
    case Method::TLCL: {
      auto out = scale(add(need(terms.ce, "ce"), need(terms.ce_weighting, "ce_weighting")), keep);
      if (lambda == 0.0) return out;
      return add(out, scale(need(terms.lcl, "lcl"), l));
    }
  }
  throw std::invalid_argument("combine: unknown method");
}

}  // namespace clbench
