#pragma once

#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arclab/core.hpp"

namespace arclab {

struct KMeansModel {
  std::size_t k = 0;
  Matrix centroids;                     // k x dim
  std::vector<std::size_t> assignment;  // point -> cluster
  double inertia = 0.0;
  std::uint64_t seed = 0;
  int iterations = 0;
  Vec inertia_history;  // after every Lloyd iteration

  /// Nearest centroid, ties to the lowest index.
  std::size_t predict(std::span<const double> x) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      const double d = squared_distance(centroids.row(c), x);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    return best;
  }

  std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> m(k);
    for (std::size_t i = 0; i < assignment.size(); ++i) m[assignment[i]].push_back(i);
    return m;
  }

  nlohmann::json to_json() const {
    nlohmann::json c = nlohmann::json::array();
    for (std::size_t i = 0; i < k; ++i) {
      auto row = centroids.row(i);
      c.push_back(Vec(row.begin(), row.end()));
    }
    return {{"k", k}, {"seed", seed}, {"inertia", inertia}, {"centroids", c}};
  }
};

inline double recompute_inertia(const Matrix& points, const Matrix& centroids,
                                std::span<const std::size_t> assignment) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.rows(); ++i)
    s += squared_distance(points.row(i), centroids.row(assignment[i]));
  return s;
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing. An empty cluster takes the point farthest from its centroid.
inline KMeansModel kmeans_fit(const Matrix& points, std::size_t k, std::uint64_t seed,
                              int max_iters = 300) {
  const std::size_t n = points.rows();
  const std::size_t dim = points.cols();
  if (k == 0) throw Error("kmeans: k must be positive");
  {
    std::set<std::vector<double>> distinct;
    for (std::size_t i = 0; i < n; ++i) distinct.emplace(points.row(i).begin(), points.row(i).end());
    if (k > distinct.size())
      throw Error("kmeans: k=" + std::to_string(k) + " exceeds the " +
                  std::to_string(distinct.size()) + " distinct points");
  }
  Rng rng(seed);
  KMeansModel m;
  m.k = k;
  m.seed = seed;
  m.centroids = Matrix(k, dim);

  // k-means++
  Vec d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(n);
  std::copy(points.row(first).begin(), points.row(first).end(), m.centroids.row(0).begin());
  for (std::size_t c = 1; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], squared_distance(points.row(i), m.centroids.row(c - 1)));
    const std::size_t pick = rng.categorical(d2);
    std::copy(points.row(pick).begin(), points.row(pick).end(), m.centroids.row(c).begin());
  }

  m.assignment.assign(n, 0);
  auto assign = [&]() {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = m.predict(points.row(i));
      if (c != m.assignment[i]) changed = true;
      m.assignment[i] = c;
    }
    return changed;
  };
  assign();
  for (int it = 1; it <= max_iters; ++it) {
    // repair empty clusters
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<std::size_t> counts(k, 0);
      for (auto a : m.assignment) ++counts[a];
      if (counts[c] > 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[m.assignment[i]] < 2) continue;
        const double dd = squared_distance(points.row(i), m.centroids.row(m.assignment[i]));
        if (dd > far_d) {
          far_d = dd;
          far = i;
        }
      }
      m.assignment[far] = c;
      std::copy(points.row(far).begin(), points.row(far).end(), m.centroids.row(c).begin());
    }
    // update
    Matrix sums(k, dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[m.assignment[i]];
      for (std::size_t j = 0; j < dim; ++j) sums(m.assignment[i], j) += points(i, j);
    }
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < dim; ++j) m.centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    m.inertia_history.push_back(recompute_inertia(points, m.centroids, m.assignment));
    m.iterations = it;
    if (!assign()) break;
  }
  m.inertia = recompute_inertia(points, m.centroids, m.assignment);
  return m;
}

/// Sum over clusters of the majority label count, divided by the number of points.
inline double purity(const KMeansModel& model, std::span<const int> labels) {
  if (labels.size() != model.assignment.size())
    throw Error("purity: labels must cover every assigned point");
  std::vector<std::map<int, std::size_t>> counts(model.k);
  for (std::size_t i = 0; i < labels.size(); ++i) ++counts[model.assignment[i]][labels[i]];
  std::size_t total = 0;
  for (const auto& c : counts) {
    std::size_t best = 0;
    for (const auto& [label, n] : c) best = std::max(best, n);
    total += best;
  }
  return static_cast<double>(total) / static_cast<double>(labels.size());
}

inline std::string assignment_csv(const KMeansModel& model, std::span<const std::size_t> ids) {
  std::string out = "state_index,cluster\n";
  for (std::size_t i = 0; i < model.assignment.size(); ++i)
    out += std::to_string(ids.empty() ? i : ids[i]) + "," + std::to_string(model.assignment[i]) + "\n";
  return out;
}

}  // namespace arclab
