#pragma once

// Two-dimensional PCA of representation sets (deterministic stand-in for a
// t-SNE style plot) and a simple cluster-separation statistic.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clbench/diag.hpp"

namespace clbench {

struct Projection2d {
  std::vector<std::array<double, 2>> coords;
  std::vector<int> labels;
  std::vector<std::vector<double>> components;  // two unit vectors of length d
  std::array<double, 2> variances{};            // variance captured by each component
  std::vector<double> mean;
};

namespace detail {

// Leading eigenvector of a symmetric PSD matrix by power iteration.
inline std::pair<std::vector<double>, double> power_iteration(const std::vector<double>& cov, std::size_t d,
                                                              std::size_t max_iter = 5000, double tol = 1e-14) {
  std::vector<double> v(d), next(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7) + 1e-3 * static_cast<double>(i);
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  double eigenvalue = 0.0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += cov[i * d + j] * v[j];
      next[i] = acc;
    }
    double n2 = 0.0;
    for (double x : next) n2 += x * x;
    const double nn = std::sqrt(n2);
    if (nn == 0.0) return {std::vector<double>(d, 0.0), 0.0};
    double diff = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      next[i] /= nn;
      diff = std::max(diff, std::abs(next[i] - v[i]));
    }
    v.swap(next);
    eigenvalue = nn;
    if (diff < tol) break;
  }
  return {v, eigenvalue};
}

inline void fix_sign(std::vector<double>& v) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
  if (v[arg] < 0)
    for (double& x : v) x = -x;
}

}  // namespace detail

/// Mean-centred PCA onto the two leading principal axes. Each axis is
/// sign-normalized so its largest-magnitude coordinate is positive. If the
/// centred data has rank < 2 the second axis is zero and a warning is emitted.
inline Projection2d project_2d(std::span<const std::vector<double>> points, std::span<const int> labels) {
  const std::size_t m = points.size();
  if (m < 3) throw std::invalid_argument("project_2d: need at least 3 points");
  const std::size_t d = points[0].size();
  if (d < 2) throw std::invalid_argument("project_2d: need dimension >= 2");
  if (labels.size() != m) throw std::invalid_argument("project_2d: label count mismatch");
  for (const auto& p : points)
    if (p.size() != d) throw std::invalid_argument("project_2d: ragged input");

  Projection2d out;
  out.mean.assign(d, 0.0);
  for (const auto& p : points)
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += p[j];
  for (double& x : out.mean) x /= static_cast<double>(m);

  std::vector<double> centred(m * d);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) centred[i * d + j] = points[i][j] - out.mean[j];
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = centred[i * d + a];
      if (xa == 0.0) continue;
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += xa * centred[i * d + b];
    }
  for (double& x : cov) x /= static_cast<double>(m);

  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];
  const double floor = 1e-12 * std::max(trace, 1e-300);

  auto [v1, l1] = detail::power_iteration(cov, d);
  if (l1 <= floor) {
    v1.assign(d, 0.0);
    l1 = 0.0;
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) cov[a * d + b] -= l1 * v1[a] * v1[b];
  auto [v2, l2] = detail::power_iteration(cov, d);
  if (l2 <= floor) {
    diag::warn("project_2d: data has rank < 2, second component set to zero");
    v2.assign(d, 0.0);
    l2 = 0.0;
  }
  detail::fix_sign(v1);
  detail::fix_sign(v2);

  out.components = {v1, v2};
  out.variances = {l1, l2};
  out.labels.assign(labels.begin(), labels.end());
  out.coords.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    double x = 0.0, y = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      x += centred[i * d + j] * v1[j];
      y += centred[i * d + j] * v2[j];
    }
    out.coords[i] = {x, y};
  }
  return out;
}

/// `x,y,label_name` with a header row.
inline void write_projection_csv(std::ostream& out, const Projection2d& p, const std::vector<std::string>& class_names) {
  out << "x,y,label_name\n";
  out.precision(10);
  for (std::size_t i = 0; i < p.coords.size(); ++i) {
    const auto label = static_cast<std::size_t>(p.labels[i]);
    out << p.coords[i][0] << ',' << p.coords[i][1] << ','
        << (label < class_names.size() ? class_names[label] : std::to_string(label)) << '\n';
  }
}

/// Mean cosine similarity over same-class pairs minus mean over
/// different-class pairs (unordered pairs, i != j).
inline double cluster_separation(std::span<const std::vector<double>> reps, std::span<const int> labels) {
  if (reps.size() != labels.size()) throw std::invalid_argument("cluster_separation: label count mismatch");
  std::vector<std::vector<double>> unit;
  for (const auto& r : reps) {
    double n = 0.0;
    for (double x : r) n += x * x;
    n = std::max(std::sqrt(n), 1e-12);
    auto& u = unit.emplace_back(r);
    for (double& x : u) x /= n;
  }
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < unit.size(); ++i)
    for (std::size_t j = i + 1; j < unit.size(); ++j) {
      double c = 0.0;
      for (std::size_t k = 0; k < unit[i].size(); ++k) c += unit[i][k] * unit[j][k];
      if (labels[i] == labels[j]) {
        intra += c;
        ++n_intra;
      } else {
        inter += c;
        ++n_inter;
      }
    }
  if (n_intra == 0 || n_inter == 0) throw std::invalid_argument("cluster_separation: need both same- and cross-class pairs");
  return intra / static_cast<double>(n_intra) - inter / static_cast<double>(n_inter);
}

}  // namespace clbench
