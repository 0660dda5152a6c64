#pragma once

// Forward pass of one training objective over a batch: builds the positive
// views the method calls for, evaluates every constituent loss, and mixes
// them with `combine`.

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clbench/adversarial.hpp"
#include "clbench/encoder.hpp"
#include "clbench/objectives.hpp"

namespace clbench {

struct Batch {
  std::vector<TokenIds> ids;
  std::vector<int> labels;

  std::size_t size() const { return ids.size(); }
};

/// Perturbations recorded on a first evaluation and replayed on later ones.
/// Finite-difference checks use this to hold r fixed, matching the
/// stop-gradient the optimizer sees.
template <std::floating_point T>
struct FrozenPerturbations {
  std::optional<Perturbation<T>> embedding;
  std::optional<Perturbation<T>> token;
  std::optional<Perturbation<T>> weighting_token;
};

template <std::floating_point T>
struct StepResult {
  Tensor<T> total;
  LossTerms<T> terms;
  Tensor<T> cls;  // clean pooled representations, N x hidden
  std::map<std::string, double> components;
};

namespace detail {

template <std::floating_point T>
Tensor<T> reduce_contrast(const Tensor<T>& raw, std::size_t rows, ContrastReduction reduction) {
  return reduction == ContrastReduction::Mean ? scale(raw, T(1) / T(rows)) : raw;
}

template <std::floating_point T>
const Perturbation<T>& remember(std::optional<Perturbation<T>>* slot, std::optional<Perturbation<T>>& local,
                                auto&& compute) {
  auto& target = slot ? *slot : local;
  if (!target) target = compute();
  return *target;
}

}  // namespace detail

/// Evaluates the configured objective. `train_mode` enables dropout in every
/// encoder pass. When `frozen` is given, perturbations already stored there
/// are reused and new ones are stored.
template <std::floating_point T>
StepResult<T> objective_forward(const Model<T>& model, const Batch& batch, const ObjectiveConfig& cfg, Rng& rng,
                                bool train_mode = true, FrozenPerturbations<T>* frozen = nullptr) {
  cfg.validate();
  if (batch.size() == 0) throw std::invalid_argument("objective: empty batch");
  if (batch.labels.size() != batch.size()) throw std::invalid_argument("objective: label count mismatch");
  const Method method = cfg.method;
  if (uses_weighting(method) && !model.has_weighting())
    throw std::invalid_argument("objective: " + std::string(method_name(method)) + " needs a weighting network");

  StepResult<T> out;
  const auto& encoder = model.encoder();
  const std::span<const TokenIds> ids(batch.ids);
  const std::span<const int> labels(batch.labels);
  const std::size_t n = batch.size();
  const bool contrast = cfg.lambda > 0.0;

  auto clean = encoder.encode(ids, train_mode, rng);
  auto h = stack_cls<T>(clean);
  out.cls = h;
  auto ce = cross_entropy_logits(model.classifier().logits(h), labels);
  out.terms.ce = ce;
  out.components["ce"] = ce.item();

  std::vector<int> labels2(labels.begin(), labels.end());
  labels2.insert(labels2.end(), labels.begin(), labels.end());
  auto maybe_project = [&](const Tensor<T>& reps) { return cfg.project_all ? model.projection().project(reps) : reps; };

  std::optional<Perturbation<T>> local_embedding, local_token, local_wtoken;

  switch (method) {
    case Method::CE: break;

    case Method::SCL: {
      if (!contrast) break;
      auto hv = stack_cls<T>(dropout_view(encoder, ids, rng));
      auto raw = ntxent(maybe_project(concat_rows<T>({h, hv})), labels2, cfg.tau);
      out.components["ntxent_sum"] = raw.item();
      out.terms.ntxent = detail::reduce_contrast(raw, 2 * n, cfg.reduction);
      out.components["ntxent"] = out.terms.ntxent->item();
      break;
    }

    case Method::CAT: {
      const auto& r = detail::remember<T>(frozen ? &frozen->embedding : nullptr, local_embedding,
                                          [&] { return embedding_perturbation(encoder, ce, cfg.epsilon, cfg.sign); });
      auto hj = stack_cls<T>(encode_perturbed(encoder, ids, r, train_mode, rng));
      out.terms.ce_perturbed = cross_entropy_logits(model.classifier().logits(hj), labels);
      out.components["ce_perturbed"] = out.terms.ce_perturbed->item();
      if (!contrast) break;
      out.terms.infonce = infonce(model.projection().project(concat_rows<T>({h, hj})), cfg.tau, cfg.infonce_direction);
      out.components["infonce"] = out.terms.infonce->item();
      break;
    }

    case Method::TACT: {
      const auto& r = detail::remember<T>(frozen ? &frozen->token : nullptr, local_token,
                                          [&] { return token_perturbation(h, ce, cfg.epsilon, cfg.sign); });
      auto hj = apply_token_perturbation(h, r);
      out.terms.ce_perturbed = cross_entropy_logits(model.classifier().logits(hj), labels);
      out.components["ce_perturbed"] = out.terms.ce_perturbed->item();
      if (!contrast) break;
      out.terms.infonce = infonce(model.projection().project(concat_rows<T>({h, hj})), cfg.tau, cfg.infonce_direction);
      out.components["infonce"] = out.terms.infonce->item();
      break;
    }

    case Method::LCL:
    case Method::TLCL: {
      const auto& wnet = model.weighting();
      auto w_clean = stack_cls<T>(wnet.encoder.encode(ids, train_mode, rng));
      auto w_logits = wnet.head.logits(w_clean);
      auto ce_w = cross_entropy_logits(w_logits, labels);
      out.terms.ce_weighting = ce_w;
      out.components["ce_weighting"] = ce_w.item();
      if (!contrast) break;
      auto w = softmax_rows(w_logits);
      Tensor<T> views, view_weights = w;
      if (method == Method::LCL) {
        views = stack_cls<T>(dropout_view(encoder, ids, rng));
      } else {
        const auto& r = detail::remember<T>(frozen ? &frozen->token : nullptr, local_token,
                                            [&] { return token_perturbation(h, ce, cfg.epsilon, cfg.sign); });
        views = apply_token_perturbation(h, r);
        if (cfg.weighting_sees_adversarial) {
          const auto& rw = detail::remember<T>(frozen ? &frozen->weighting_token : nullptr, local_wtoken, [&] {
            return token_perturbation(w_clean, ce_w, cfg.epsilon, cfg.sign);
          });
          view_weights = softmax_rows(wnet.head.logits(apply_token_perturbation(w_clean, rw)));
        }
      }
      auto weights = concat_rows<T>({w, view_weights});
      auto raw = lcl_loss(maybe_project(concat_rows<T>({h, views})), labels2, weights, cfg.tau);
      out.components["lcl_sum"] = raw.item();
      out.terms.lcl = detail::reduce_contrast(raw, 2 * n, cfg.reduction);
      out.components["lcl"] = out.terms.lcl->item();
      break;
    }
  }

  out.total = combine(method, out.terms, cfg.lambda);
  out.components["total"] = out.total.item();
  return out;
}

}  // namespace clbench
