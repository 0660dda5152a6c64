#pragma once

// Training protocol: Adam, per-epoch dev macro-F1, early stopping with
// best-dev checkpoint selection, a single test evaluation on that checkpoint,
// and the data-efficiency / batch-size experiment drivers.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clbench/adam.hpp"
#include "clbench/checkpoint.hpp"
#include "clbench/corpus.hpp"
#include "clbench/encoder.hpp"
#include "clbench/metrics.hpp"
#include "clbench/objectives.hpp"
#include "clbench/step.hpp"

namespace clbench {

inline constexpr std::array<double, 4> kDataFractions{0.10, 0.25, 0.50, 1.00};

struct TrainConfig {
  std::string task = "task";
  Method method = Method::CE;
  std::size_t batch_size = 16;
  double learning_rate = 5e-5;
  std::size_t max_epochs = 25;
  std::size_t patience = 5;
  std::size_t max_seq_len = kDefaultMaxLen;
  double lambda = 0.5;
  double tau = 0.3;
  double epsilon = 0.01;
  std::uint64_t seed = 0;
  double data_fraction = 1.0;
  std::size_t train_cap = 50000;
  std::size_t dev_cap = 5000;
  std::size_t test_cap = 5000;

  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t projection_dim = 64;
  std::size_t weighting_hidden = 0;  // 0: half of `hidden`
  std::size_t weighting_layers = 0;  // 0: half of `layers`, at least 1
  double keep_prob = 0.9;
  std::size_t vocab_max = 30000;

  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  bool balanced_sampler = false;
  FgsmSign sign = FgsmSign::Printed;
  InfoNceDirection infonce_direction = InfoNceDirection::Both;
  ContrastReduction reduction = ContrastReduction::Mean;
  bool weighting_sees_adversarial = false;
  bool project_all = false;

  /// Also evaluate accuracy on the (unshuffled) train split after every epoch.
  bool track_train_accuracy = false;
  /// When set, the best checkpoint and the run record are written here.
  std::string out_dir;

  ObjectiveConfig objective() const {
    ObjectiveConfig o;
    o.method = method;
    o.lambda = lambda;
    o.tau = tau;
    o.epsilon = epsilon;
    o.sign = sign;
    o.infonce_direction = infonce_direction;
    o.reduction = reduction;
    o.weighting_sees_adversarial = weighting_sees_adversarial;
    o.project_all = project_all;
    return o;
  }

  AdamConfig adam() const { return {learning_rate, beta1, beta2, adam_eps}; }

  void validate() const {
    objective().validate();
    if (batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
    if (batch_size == 1 && is_contrastive(method) && lambda > 0.0)
      throw std::invalid_argument("train: batch size 1 is not supported for contrastive method " +
                                  std::string(method_name(method)) + " (needs in-batch negatives)");
    if (max_epochs == 0) throw std::invalid_argument("train: max_epochs must be positive");
    if (patience == 0 || patience > max_epochs) throw std::invalid_argument("train: patience must be in [1, max_epochs]");
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw std::invalid_argument("train: data fraction must be in (0, 1]");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
    if (max_seq_len < 3) throw std::invalid_argument("train: max_seq_len must be at least 3");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::map<std::string, double> losses;  // batch means of each loss component
  double dev_macro_f1 = 0.0;
  std::optional<double> train_accuracy;
  double seconds = 0.0;
};

struct RunRecord {
  TrainConfig config;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_dev_f1 = 0.0;
  double test_macro_f1 = 0.0;
  MetricsReport test_report;
  std::size_t train_size = 0;
  std::size_t vocab_size = 0;
  std::size_t parameter_count = 0;
  bool stopped_early = false;
  bool diverged = false;
  std::string status = "ok";
  double wall_seconds = 0.0;
};

struct TokenizedSplit {
  std::vector<TokenIds> ids;
  std::vector<int> labels;
};

inline TokenizedSplit tokenize_split(const LabeledCorpus& corpus, const Vocabulary& vocab, std::size_t max_len) {
  TokenizedSplit out;
  for (const auto& e : corpus.examples) {
    out.ids.push_back(vocab.tokenize(e.text, max_len));
    out.labels.push_back(e.label);
  }
  return out;
}

template <std::floating_point T>
std::vector<int> predict(const Model<T>& model, std::span<const TokenIds> ids) {
  Rng unused(0);
  std::vector<int> out;
  out.reserve(ids.size());
  for (const auto& seq : ids) {
    auto h = model.encoder().encode(seq, false, unused).cls;
    const auto logits = model.classifier().logits(h);
    const auto v = logits.values();
    out.push_back(static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin()));
  }
  return out;
}

template <std::floating_point T>
MetricsReport evaluate(const Model<T>& model, const TokenizedSplit& split, std::size_t classes) {
  return macro_f1(split.labels, predict(model, split.ids), classes);
}

/// Pooled [CLS] vectors with dropout off, one row per sequence.
template <std::floating_point T>
std::vector<std::vector<double>> embed_cls(const Model<T>& model, std::span<const TokenIds> ids) {
  Rng unused(0);
  std::vector<std::vector<double>> out;
  for (const auto& seq : ids) {
    const auto cls = model.encoder().encode(seq, false, unused).cls;
    out.emplace_back(cls.values().begin(), cls.values().end());
  }
  return out;
}

inline ModelConfig model_config_for(const TrainConfig& cfg, std::size_t vocab_size, std::size_t classes) {
  ModelConfig m;
  m.encoder.vocab_size = vocab_size;
  m.encoder.max_len = cfg.max_seq_len;
  m.encoder.hidden = cfg.hidden;
  m.encoder.layers = cfg.layers;
  m.encoder.heads = cfg.heads;
  m.encoder.ffn = cfg.ffn;
  m.encoder.keep_prob = cfg.keep_prob;
  m.classes = classes;
  m.projection_dim = cfg.projection_dim;
  m.with_weighting = uses_weighting(cfg.method);
  m.weighting = ModelConfig::default_weighting(m.encoder);
  if (cfg.weighting_hidden) m.weighting.hidden = cfg.weighting_hidden;
  if (cfg.weighting_layers) m.weighting.layers = cfg.weighting_layers;
  return m;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<int>& labels, std::size_t batch_size,
                                                          bool balanced, Rng& rng) {
  std::vector<std::size_t> order;
  if (balanced) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    for (auto& [c, idx] : by_class) std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (std::size_t round = 0; order.size() < labels.size(); ++round)
      for (auto& [c, idx] : by_class)
        if (round < idx.size()) order.push_back(idx[round]);
  } else {
    order.resize(labels.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng.engine());
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch_size)));
  return batches;
}

}  // namespace detail

template <std::floating_point T>
struct TrainResult {
  RunRecord record;
  Checkpoint<T> checkpoint;  // best-dev parameters
  TokenizedSplit dev;
};

inline void write_run_record(std::ostream& out, const RunRecord& record);

/// Runs the full protocol and returns the record together with the best-dev
/// model. The vocabulary is built from the (capped, subsampled) train split.
template <std::floating_point T = float>
TrainResult<T> train_model(const TrainConfig& cfg, const Dataset& data) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  if (data.train.examples.empty() || data.dev.examples.empty() || data.test.examples.empty())
    throw std::invalid_argument("train: every split must be non-empty");
  const std::size_t classes = data.classes().size();
  if (classes < 2) throw std::invalid_argument("train: need at least two classes");

  auto train_split = cap_size(data.train, cfg.train_cap, cfg.seed + 1);
  auto dev_split = cap_size(data.dev, cfg.dev_cap, cfg.seed + 2);
  auto test_split = cap_size(data.test, cfg.test_cap, cfg.seed + 3);
  train_split = stratified_subsample(train_split, cfg.data_fraction, cfg.seed + 4);

  std::vector<std::string> texts;
  for (const auto& e : train_split.examples) texts.push_back(e.text);
  auto vocab = Vocabulary::build(texts, cfg.vocab_max);
  auto train_tok = tokenize_split(train_split, vocab, cfg.max_seq_len);
  auto dev_tok = tokenize_split(dev_split, vocab, cfg.max_seq_len);
  auto test_tok = tokenize_split(test_split, vocab, cfg.max_seq_len);

  Rng rng(cfg.seed);
  Model<T> model(model_config_for(cfg, vocab.size(), classes), rng);
  Adam<T> adam(model.parameters(), cfg.adam());
  const auto objective = cfg.objective();

  TrainResult<T> result;
  RunRecord& rec = result.record;
  rec.config = cfg;
  rec.train_size = train_split.size();
  rec.vocab_size = vocab.size();
  rec.parameter_count = model.parameter_count();

  std::optional<std::vector<std::vector<T>>> best;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    EpochRecord er;
    er.epoch = epoch;
    bool diverged = false;
    std::size_t steps = 0;
    for (const auto& idx : detail::make_batches(train_tok.labels, cfg.batch_size, cfg.balanced_sampler, rng)) {
      Batch batch;
      for (auto i : idx) {
        batch.ids.push_back(train_tok.ids[i]);
        batch.labels.push_back(train_tok.labels[i]);
      }
      auto step = objective_forward(model, batch, objective, rng, true);
      if (!std::isfinite(step.total.item())) {
        diverged = true;
        rec.status = "diverged: non-finite loss in epoch " + std::to_string(epoch);
        break;
      }
      adam.zero_grad();
      backward(step.total);
      try {
        adam.step();
      } catch (const NonFiniteGradient& e) {
        diverged = true;
        rec.status = std::string("diverged: ") + e.what() + " in epoch " + std::to_string(epoch);
        break;
      }
      for (const auto& [k, v] : step.components) er.losses[k] += v;
      ++steps;
    }
    if (diverged) {
      rec.diverged = true;
      break;
    }
    for (auto& [k, v] : er.losses) v /= static_cast<double>(steps);
    er.dev_macro_f1 = evaluate(model, dev_tok, classes).macro_f1;
    if (cfg.track_train_accuracy) er.train_accuracy = evaluate(model, train_tok, classes).accuracy;
    er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    rec.epochs.push_back(er);

    if (!best || er.dev_macro_f1 > rec.best_dev_f1) {
      rec.best_dev_f1 = er.dev_macro_f1;
      rec.best_epoch = epoch;
      best = model.snapshot();
      stale = 0;
    } else if (++stale >= cfg.patience) {
      rec.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }

  if (best) {
    model.restore(*best);
    rec.test_report = evaluate(model, test_tok, classes);
    rec.test_macro_f1 = rec.test_report.macro_f1;
  } else {
    rec.status += "; no completed epoch, test not evaluated";
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  result.checkpoint.model = model;
  result.checkpoint.vocab = vocab;
  result.checkpoint.classes = data.classes();
  result.checkpoint.metadata = {{"task", cfg.task},
                                {"method", std::string(method_name(cfg.method))},
                                {"best_epoch", rec.best_epoch},
                                {"seed", cfg.seed}};
  result.dev = std::move(dev_tok);

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    save_checkpoint((std::filesystem::path(cfg.out_dir) / "checkpoint.bin").string(), result.checkpoint);
    std::ofstream out(std::filesystem::path(cfg.out_dir) / "run.jsonl");
    write_run_record(out, rec);
  }
  return result;
}

template <std::floating_point T = float>
RunRecord train(const TrainConfig& cfg, const Dataset& data) {
  return train_model<T>(cfg, data).record;
}

// ---------------------------------------------------------------------------
// Sweeps

/// Records indexed [method][setting]; settings ascend.
template <class Setting>
struct SweepGrid {
  std::string task;
  std::vector<Method> methods;
  std::vector<Setting> settings;
  std::vector<std::vector<RunRecord>> runs;

  const RunRecord& at(Method m, Setting s) const {
    auto mi = std::find(methods.begin(), methods.end(), m) - methods.begin();
    auto si = std::find(settings.begin(), settings.end(), s) - settings.begin();
    if (mi == static_cast<std::ptrdiff_t>(methods.size()) || si == static_cast<std::ptrdiff_t>(settings.size()))
      throw std::out_of_range("sweep grid: no such cell");
    return runs[static_cast<std::size_t>(mi)][static_cast<std::size_t>(si)];
  }
};

using DataEfficiencyGrid = SweepGrid<double>;
using BatchSizeGrid = SweepGrid<std::size_t>;

namespace detail {

inline std::vector<Method> unique_methods(std::span<const Method> methods) {
  std::vector<Method> out;
  for (auto m : methods)
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  if (out.empty()) throw std::invalid_argument("sweep: no methods");
  return out;
}

inline std::string sweep_dir(const std::string& base, Method m, const std::string& setting) {
  if (base.empty()) return {};
  return (std::filesystem::path(base) / (std::string(method_name(m)) + "_" + setting)).string();
}

}  // namespace detail

/// One run per (method, fraction) on nested stratified subsets of the train split.
template <std::floating_point T = float>
DataEfficiencyGrid data_efficiency_sweep(const TrainConfig& base, const Dataset& data,
                                         std::span<const Method> methods, std::span<const double> fractions) {
  std::vector<double> fs;
  for (double f : fractions) {
    auto it = std::find_if(kDataFractions.begin(), kDataFractions.end(), [f](double a) { return std::abs(a - f) < 1e-12; });
    if (it == kDataFractions.end())
      throw std::invalid_argument("data_efficiency_sweep: fraction " + std::to_string(f) +
                                  " not in {0.10, 0.25, 0.50, 1.00}");
    if (std::find(fs.begin(), fs.end(), *it) == fs.end()) fs.push_back(*it);
  }
  if (fs.empty()) throw std::invalid_argument("data_efficiency_sweep: no fractions");
  std::sort(fs.begin(), fs.end());
  for (double f : fs) (void)stratified_subsample(data.train, f, base.seed + 4);

  DataEfficiencyGrid grid;
  grid.task = base.task;
  grid.methods = detail::unique_methods(methods);
  grid.settings = fs;
  for (auto m : grid.methods) {
    auto& row = grid.runs.emplace_back();
    for (double f : fs) {
      TrainConfig cfg = base;
      cfg.method = m;
      cfg.data_fraction = f;
      cfg.out_dir = detail::sweep_dir(base.out_dir, m, std::to_string(static_cast<int>(std::lround(f * 100))));
      row.push_back(train<T>(cfg, data));
    }
  }
  return grid;
}

/// Identical configuration except for the batch size (deduplicated, ascending).
template <std::floating_point T = float>
BatchSizeGrid batch_size_sweep(const TrainConfig& base, const Dataset& data, std::span<const Method> methods,
                               std::span<const std::size_t> sizes) {
  std::set<std::size_t> unique(sizes.begin(), sizes.end());
  if (unique.empty()) throw std::invalid_argument("batch_size_sweep: no batch sizes");
  if (unique.contains(0)) throw std::invalid_argument("batch_size_sweep: batch sizes must be positive");
  BatchSizeGrid grid;
  grid.task = base.task;
  grid.methods = detail::unique_methods(methods);
  grid.settings.assign(unique.begin(), unique.end());
  for (auto m : grid.methods)
    if (unique.contains(1) && is_contrastive(m) && base.lambda > 0.0)
      throw std::invalid_argument("batch_size_sweep: batch size 1 leaves contrastive method " +
                                  std::string(method_name(m)) + " without in-batch negatives");
  for (auto m : grid.methods) {
    auto& row = grid.runs.emplace_back();
    for (auto s : grid.settings) {
      TrainConfig cfg = base;
      cfg.method = m;
      cfg.batch_size = s;
      cfg.out_dir = detail::sweep_dir(base.out_dir, m, "bs" + std::to_string(s));
      row.push_back(train<T>(cfg, data));
    }
  }
  return grid;
}

}  // namespace clbench

#include "clbench/report.hpp"
