#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the autodiff engine: losses are plain loops over doubles and
// gradients come from central finite differences.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "clbench/autodiff.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return dot(a, b) / (std::sqrt(dot(a, a)) * std::sqrt(dot(b, b)));
}

/// sum_i -1/|P_i| sum_{j in P_i} log(e^{s_ij/t} / sum_{k != i} e^{s_ik/t})
inline double ntxent(const Matrix& h, const std::vector<int>& y, double tau) {
  const std::size_t n = h.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) denom += std::exp(cosine(h[i], h[k]) / tau);
    std::size_t positives = 0;
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || y[j] != y[i]) continue;
      ++positives;
      acc += std::log(std::exp(cosine(h[i], h[j]) / tau) / denom);
    }
    if (positives) total += -acc / static_cast<double>(positives);
  }
  return total;
}

/// Mean over anchors of -log(e^{s_ij/t} / sum_{k != i} e^{s_ik/t}), j = (i + N) mod 2N.
inline double infonce(const Matrix& z, double tau, bool both_directions = true) {
  const std::size_t n2 = z.size(), n = n2 / 2;
  const std::size_t anchors = both_directions ? n2 : n;
  double total = 0.0;
  for (std::size_t i = 0; i < anchors; ++i) {
    const std::size_t j = (i + n) % n2;
    double denom = 0.0;
    for (std::size_t k = 0; k < n2; ++k)
      if (k != i) denom += std::exp(cosine(z[i], z[k]) / tau);
    total += -std::log(std::exp(cosine(z[i], z[j]) / tau) / denom);
  }
  return total / static_cast<double>(anchors);
}

/// sum_i -1/|P_i| sum_{j in P_i} log(w_{i,y_i} e^{s_ij/t} / sum_{k != i} w_{i,y_k} e^{s_ik/t})
inline double lcl(const Matrix& h, const std::vector<int>& y, const Matrix& w, double tau) {
  const std::size_t n = h.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) denom += w[i][static_cast<std::size_t>(y[k])] * std::exp(cosine(h[i], h[k]) / tau);
    std::size_t positives = 0;
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || y[j] != y[i]) continue;
      ++positives;
      acc += std::log(w[i][static_cast<std::size_t>(y[i])] * std::exp(cosine(h[i], h[j]) / tau) / denom);
    }
    if (positives) total += -acc / static_cast<double>(positives);
  }
  return total;
}

inline double cross_entropy(const Matrix& probs, const std::vector<int>& y) {
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) total -= std::log(probs[i][static_cast<std::size_t>(y[i])]);
  return total / static_cast<double>(probs.size());
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += e[i] = std::exp(x[i] - mx);
  for (auto& v : e) v /= s;
  return e;
}

inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences of f with respect to every entry of `values`,
/// restoring each entry afterwards.
inline std::vector<double> numeric_gradient(std::span<double> values, const std::function<double()>& f,
                                            double step = 1e-5) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = f();
    values[i] = saved - step;
    const double down = f();
    values[i] = saved;
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

inline Matrix rows_of(const clbench::Tensor<double>& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline clbench::Tensor<double> random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& gen,
                                             bool trainable = true, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = u(gen);
  return trainable ? clbench::Tensor<double>::parameter(rows, cols, std::move(v))
                   : clbench::Tensor<double>::constant(rows, cols, std::move(v));
}

inline std::vector<int> random_labels(std::size_t n, int classes, std::mt19937_64& gen) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = u(gen);
  return y;
}

/// Random softmax rows (strictly positive, rows sum to 1).
inline clbench::Tensor<double> random_weights(std::size_t rows, std::size_t classes, std::mt19937_64& gen) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v;
  for (std::size_t i = 0; i < rows; ++i) {
    std::vector<double> logits(classes);
    for (auto& x : logits) x = nd(gen);
    auto p = softmax(logits);
    v.insert(v.end(), p.begin(), p.end());
  }
  return clbench::Tensor<double>::constant(rows, classes, std::move(v));
}

}  // namespace oracle
