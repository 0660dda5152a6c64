#pragma once

// Run-record serialization (one JSON object per line: epochs, then a
// summary) and the tab-separated tables emitted by the sweeps and `compare`.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clbench/metrics.hpp"
#include "clbench/trainer.hpp"

namespace clbench {

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = {{"classes", r.classes},     {"macro_f1", r.macro_f1}, {"accuracy", r.accuracy}, {"f1", r.f1},
       {"precision", r.precision}, {"recall", r.recall},     {"support", r.support},   {"confusion", r.confusion}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  j.at("classes").get_to(r.classes);
  j.at("macro_f1").get_to(r.macro_f1);
  j.at("accuracy").get_to(r.accuracy);
  j.at("f1").get_to(r.f1);
  j.at("precision").get_to(r.precision);
  j.at("recall").get_to(r.recall);
  j.at("support").get_to(r.support);
  j.at("confusion").get_to(r.confusion);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"task", c.task},
       {"method", std::string(method_name(c.method))},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"max_epochs", c.max_epochs},
       {"patience", c.patience},
       {"max_seq_len", c.max_seq_len},
       {"lambda", c.lambda},
       {"tau", c.tau},
       {"epsilon", c.epsilon},
       {"seed", c.seed},
       {"data_fraction", c.data_fraction},
       {"train_cap", c.train_cap},
       {"dev_cap", c.dev_cap},
       {"test_cap", c.test_cap},
       {"hidden", c.hidden},
       {"layers", c.layers},
       {"heads", c.heads},
       {"ffn", c.ffn},
       {"projection_dim", c.projection_dim},
       {"weighting_hidden", c.weighting_hidden},
       {"weighting_layers", c.weighting_layers},
       {"keep_prob", c.keep_prob},
       {"vocab_max", c.vocab_max},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"balanced_sampler", c.balanced_sampler},
       {"fgsm_sign", c.sign == FgsmSign::Printed ? "printed" : "ascent"},
       {"infonce_direction", c.infonce_direction == InfoNceDirection::Both ? "both" : "single"},
       {"contrast_reduction", c.reduction == ContrastReduction::Mean ? "mean" : "sum"},
       {"weighting_sees_adversarial", c.weighting_sees_adversarial},
       {"project_all", c.project_all}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto method = parse_method(j.at("method").get<std::string>());
  if (!method) throw std::invalid_argument("run record: unknown method " + j.at("method").get<std::string>());
  c.method = *method;
  j.at("task").get_to(c.task);
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("max_epochs").get_to(c.max_epochs);
  j.at("patience").get_to(c.patience);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("lambda").get_to(c.lambda);
  j.at("tau").get_to(c.tau);
  j.at("epsilon").get_to(c.epsilon);
  j.at("seed").get_to(c.seed);
  j.at("data_fraction").get_to(c.data_fraction);
  j.at("train_cap").get_to(c.train_cap);
  j.at("dev_cap").get_to(c.dev_cap);
  j.at("test_cap").get_to(c.test_cap);
  j.at("hidden").get_to(c.hidden);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("ffn").get_to(c.ffn);
  j.at("projection_dim").get_to(c.projection_dim);
  j.at("weighting_hidden").get_to(c.weighting_hidden);
  j.at("weighting_layers").get_to(c.weighting_layers);
  j.at("keep_prob").get_to(c.keep_prob);
  j.at("vocab_max").get_to(c.vocab_max);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  j.at("balanced_sampler").get_to(c.balanced_sampler);
  c.sign = j.at("fgsm_sign").get<std::string>() == "ascent" ? FgsmSign::Ascent : FgsmSign::Printed;
  c.infonce_direction =
      j.at("infonce_direction").get<std::string>() == "single" ? InfoNceDirection::Single : InfoNceDirection::Both;
  c.reduction = j.at("contrast_reduction").get<std::string>() == "sum" ? ContrastReduction::Sum : ContrastReduction::Mean;
  j.at("weighting_sees_adversarial").get_to(c.weighting_sees_adversarial);
  j.at("project_all").get_to(c.project_all);
}

inline nlohmann::json epoch_json(const EpochRecord& e) {
  nlohmann::json j = {{"type", "epoch"},
                      {"epoch", e.epoch},
                      {"losses", e.losses},
                      {"dev_macro_f1", e.dev_macro_f1},
                      {"seconds", e.seconds}};
  j["train_accuracy"] = e.train_accuracy ? nlohmann::json(*e.train_accuracy) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json summary_json(const RunRecord& r) {
  return {{"type", "summary"},
          {"task", r.config.task},
          {"method", std::string(method_name(r.config.method))},
          {"best_epoch", r.best_epoch},
          {"best_dev_f1", r.best_dev_f1},
          {"test_macro_f1", r.test_macro_f1},
          {"test_report", r.test_report},
          {"epochs_run", r.epochs.size()},
          {"train_size", r.train_size},
          {"vocab_size", r.vocab_size},
          {"parameter_count", r.parameter_count},
          {"stopped_early", r.stopped_early},
          {"diverged", r.diverged},
          {"status", r.status},
          {"wall_seconds", r.wall_seconds},
          {"config", r.config}};
}

inline void write_run_record(std::ostream& out, const RunRecord& record) {
  for (const auto& e : record.epochs) out << epoch_json(e).dump() << '\n';
  out << summary_json(record).dump() << '\n';
}

/// Parses the line-delimited form written by write_run_record.
inline RunRecord read_run_record(std::istream& in) {
  RunRecord r;
  bool summary = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    const auto type = j.at("type").get<std::string>();
    if (type == "epoch") {
      EpochRecord e;
      j.at("epoch").get_to(e.epoch);
      j.at("losses").get_to(e.losses);
      j.at("dev_macro_f1").get_to(e.dev_macro_f1);
      j.at("seconds").get_to(e.seconds);
      if (!j.at("train_accuracy").is_null()) e.train_accuracy = j.at("train_accuracy").get<double>();
      r.epochs.push_back(std::move(e));
    } else if (type == "summary") {
      j.at("config").get_to(r.config);
      j.at("best_epoch").get_to(r.best_epoch);
      j.at("best_dev_f1").get_to(r.best_dev_f1);
      j.at("test_macro_f1").get_to(r.test_macro_f1);
      j.at("test_report").get_to(r.test_report);
      j.at("train_size").get_to(r.train_size);
      j.at("vocab_size").get_to(r.vocab_size);
      j.at("parameter_count").get_to(r.parameter_count);
      j.at("stopped_early").get_to(r.stopped_early);
      j.at("diverged").get_to(r.diverged);
      j.at("status").get_to(r.status);
      j.at("wall_seconds").get_to(r.wall_seconds);
      summary = true;
    } else {
      throw std::invalid_argument("run record: unknown line type " + type);
    }
  }
  if (!summary) throw std::invalid_argument("run record: missing summary line");
  return r;
}

// ---------------------------------------------------------------------------
// Tables

namespace detail {

inline std::string percent(double f1) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * f1;
  return s.str();
}

}  // namespace detail

/// Methods as rows, fractions ascending as columns, test macro-F1 in percent.
inline void write_data_efficiency_tsv(std::ostream& out, const DataEfficiencyGrid& grid) {
  out << "method";
  for (double f : grid.settings) out << '\t' << std::lround(f * 100) << '%';
  out << '\n';
  for (std::size_t m = 0; m < grid.methods.size(); ++m) {
    out << method_name(grid.methods[m]);
    for (const auto& run : grid.runs[m]) out << '\t' << detail::percent(run.test_macro_f1);
    out << '\n';
  }
}

/// Long format, one line per (method, batch size).
inline void write_batch_size_tsv(std::ostream& out, const BatchSizeGrid& grid) {
  out << "method\tbatch_size\tbest_dev_f1\ttest_f1\n";
  for (std::size_t m = 0; m < grid.methods.size(); ++m)
    for (std::size_t s = 0; s < grid.settings.size(); ++s)
      out << method_name(grid.methods[m]) << '\t' << grid.settings[s] << '\t'
          << detail::percent(grid.runs[m][s].best_dev_f1) << '\t' << detail::percent(grid.runs[m][s].test_macro_f1)
          << '\n';
}

/// Task x method table of test macro-F1. Columns follow the fixed method
/// order CE, SCL, CAT, TACT, LCL, TLCL (absent methods are omitted); rows are
/// tasks in first-seen order followed by an "Avg." row. Missing cells are "-".
/// When a (task, method) pair occurs more than once, the last record wins.
struct CompareTable {
  std::vector<Method> methods;
  std::vector<std::string> tasks;
  std::map<std::pair<std::string, Method>, double> cells;

  std::optional<double> cell(const std::string& task, Method m) const {
    auto it = cells.find({task, m});
    if (it == cells.end()) return std::nullopt;
    return it->second;
  }

  std::optional<double> average(Method m) const {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& t : tasks)
      if (auto v = cell(t, m)) {
        total += *v;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
  }
};

inline CompareTable build_compare_table(std::span<const RunRecord> records) {
  CompareTable t;
  for (const auto& r : records) {
    if (std::find(t.tasks.begin(), t.tasks.end(), r.config.task) == t.tasks.end()) t.tasks.push_back(r.config.task);
    t.cells[{r.config.task, r.config.method}] = r.test_macro_f1;
  }
  for (auto m : kAllMethods)
    for (const auto& r : records)
      if (r.config.method == m) {
        t.methods.push_back(m);
        break;
      }
  return t;
}

inline void write_compare_tsv(std::ostream& out, const CompareTable& t) {
  out << "task";
  for (auto m : t.methods) out << '\t' << method_name(m);
  out << '\n';
  auto row = [&](const std::string& name, auto value_of) {
    out << name;
    for (auto m : t.methods) {
      auto v = value_of(m);
      out << '\t' << (v ? detail::percent(*v) : "-");
    }
    out << '\n';
  };
  for (const auto& task : t.tasks) row(task, [&](Method m) { return t.cell(task, m); });
  row("Avg.", [&](Method m) { return t.average(m); });
}

}  // namespace clbench
