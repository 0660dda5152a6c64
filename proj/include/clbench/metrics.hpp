#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace clbench {

/// Classification report. Per-class F1 is 2PR/(P+R) with every 0/0 taken as
/// 0; macro-F1 averages over all classes, zero-support classes included.
struct MetricsReport {
  std::size_t classes = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [gold][predicted]
  std::vector<std::size_t> support;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
};

inline MetricsReport macro_f1(std::span<const int> gold, std::span<const int> predicted, std::size_t classes) {
  if (gold.size() != predicted.size())
    throw std::invalid_argument("macro_f1: " + std::to_string(gold.size()) + " gold labels vs " +
                                std::to_string(predicted.size()) + " predictions");
  if (classes == 0) throw std::invalid_argument("macro_f1: zero classes");
  MetricsReport r;
  r.classes = classes;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto g = gold[i], p = predicted[i];
    if (g < 0 || p < 0 || static_cast<std::size_t>(g) >= classes || static_cast<std::size_t>(p) >= classes)
      throw std::out_of_range("macro_f1: label outside [0, " + std::to_string(classes) + ") at position " +
                              std::to_string(i));
    ++r.confusion[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)];
  }
  r.support.assign(classes, 0);
  r.precision.assign(classes, 0.0);
  r.recall.assign(classes, 0.0);
  r.f1.assign(classes, 0.0);
  std::size_t correct = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t predicted_c = 0;
    for (std::size_t g = 0; g < classes; ++g) {
      r.support[c] += r.confusion[c][g];
      predicted_c += r.confusion[g][c];
    }
    const double tp = static_cast<double>(r.confusion[c][c]);
    correct += r.confusion[c][c];
    r.precision[c] = predicted_c ? tp / static_cast<double>(predicted_c) : 0.0;
    r.recall[c] = r.support[c] ? tp / static_cast<double>(r.support[c]) : 0.0;
    const double denom = r.precision[c] + r.recall[c];
    r.f1[c] = denom > 0.0 ? 2.0 * r.precision[c] * r.recall[c] / denom : 0.0;
    r.macro_f1 += r.f1[c];
  }
  r.macro_f1 /= static_cast<double>(classes);
  r.accuracy = gold.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(gold.size());
  return r;
}

}  // namespace clbench
