#ifndef RECRITIC_SELECTOR_HPP
#define RECRITIC_SELECTOR_HPP

// Sample selection for augmentation: uniform random subsets and the hard-sample
// recipe (embed -> k-means -> nearest-to-centroid per cluster -> hardest
// cluster first).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "recritic/common.hpp"

namespace recritic {

/// Rows are samples, aligned with ids.
template <typename Scalar = double>
struct EmbeddingMatrix {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  std::vector<std::string> ids;
  Matrix vectors;

  Eigen::Index rows() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }

  void validate() const {
    if (static_cast<std::size_t>(vectors.rows()) != ids.size()) {
      throw Error("embedding matrix: row count " + std::to_string(vectors.rows()) +
                  " != id count " + std::to_string(ids.size()));
    }
    if (vectors.cols() < 1) throw Error("embedding matrix: dimension must be >= 1");
    if (!vectors.allFinite()) throw Error("embedding matrix: non-finite entries");
    std::set<std::string> seen;
    for (const auto& id : ids) {
      if (!seen.insert(id).second) {
        throw Error("embedding matrix: duplicate id \"" + id + "\"");
      }
    }
  }
};

template <typename Scalar = double>
struct ClusterModel {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  int k = 0;
  Matrix centroids;
  /// Cluster index per embedding row.
  std::vector<int> assignments;
  Scalar inertia = 0;
  /// Inertia after each Lloyd update step, in iteration order.
  std::vector<Scalar> inertia_history;
  int iterations = 0;
};

template <typename Derived, typename OtherDerived>
typename Derived::Scalar squared_distance(const Eigen::MatrixBase<Derived>& a,
                                          const Eigen::MatrixBase<OtherDerived>& b) {
  return (a - b).squaredNorm();
}

/// Sum of squared distances from every row to its assigned centroid.
template <typename Scalar>
Scalar compute_inertia(const EmbeddingMatrix<Scalar>& emb,
                       const typename ClusterModel<Scalar>::Matrix& centroids,
                       const std::vector<int>& assignments) {
  Scalar total = 0;
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    total += squared_distance(emb.vectors.row(i),
                              centroids.row(assignments[static_cast<std::size_t>(i)]));
  }
  return total;
}

namespace detail {

template <typename Scalar>
std::vector<int> assign_nearest(const EmbeddingMatrix<Scalar>& emb,
                                const typename ClusterModel<Scalar>::Matrix& centroids) {
  std::vector<int> out(static_cast<std::size_t>(emb.rows()));
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    int best = 0;
    Scalar best_d = squared_distance(emb.vectors.row(i), centroids.row(0));
    for (Eigen::Index c = 1; c < centroids.rows(); ++c) {
      const Scalar d = squared_distance(emb.vectors.row(i), centroids.row(c));
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

/// k-means++ seeding: first centre uniform, the rest drawn with probability
/// proportional to the squared distance to the nearest chosen centre.
template <typename Scalar>
typename ClusterModel<Scalar>::Matrix seed_plus_plus(const EmbeddingMatrix<Scalar>& emb,
                                                     int k, DetRng& rng) {
  const Eigen::Index n = emb.rows();
  typename ClusterModel<Scalar>::Matrix centroids(k, emb.dim());
  auto first = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
  centroids.row(0) = emb.vectors.row(first);
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    d2[static_cast<std::size_t>(i)] =
        static_cast<double>(squared_distance(emb.vectors.row(i), centroids.row(0)));
  }
  for (int c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Eigen::Index pick = 0;
    if (total > 0.0) {
      const double target = rng.uniform01() * total;
      double cum = 0.0;
      pick = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double w = d2[static_cast<std::size_t>(i)];
        if (w <= 0.0) continue;
        cum += w;
        pick = i;
        if (cum > target) break;
      }
    } else {
      // Every row coincides with a chosen centre.
      pick = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
    }
    centroids.row(c) = emb.vectors.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& w = d2[static_cast<std::size_t>(i)];
      w = std::min(w, static_cast<double>(
                          squared_distance(emb.vectors.row(i), centroids.row(c))));
    }
  }
  return centroids;
}

}  // namespace detail

/// Lloyd's k-means from k-means++ seeds. Stops after max_iter updates or once
/// assignments no longer change. An empty cluster is re-seeded at the row
/// farthest from its current centroid (lowest row index on ties) among rows
/// whose cluster has more than one member; this only ever lowers inertia.
template <typename Scalar>
ClusterModel<Scalar> kmeans(const EmbeddingMatrix<Scalar>& emb, int k,
                            std::uint64_t seed, int max_iter = 100) {
  emb.validate();
  if (k < 1) throw UsageError("kmeans: k must be >= 1");
  if (k > emb.rows()) {
    throw UsageError("kmeans: k=" + std::to_string(k) + " exceeds row count " +
                     std::to_string(emb.rows()));
  }
  if (max_iter < 1) throw UsageError("kmeans: max_iter must be >= 1");

  DetRng rng(seed);
  ClusterModel<Scalar> model;
  model.k = k;
  model.centroids = detail::seed_plus_plus(emb, k, rng);
  model.assignments = detail::assign_nearest(emb, model.centroids);

  const Eigen::Index n = emb.rows();
  for (int iter = 1; iter <= max_iter; ++iter) {
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (int a : model.assignments) ++counts[static_cast<std::size_t>(a)];
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] != 0) continue;
      Eigen::Index far = -1;
      Scalar far_d = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const int owner = model.assignments[static_cast<std::size_t>(i)];
        if (counts[static_cast<std::size_t>(owner)] < 2) continue;
        const Scalar d = squared_distance(emb.vectors.row(i), model.centroids.row(owner));
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far < 0) continue;
      --counts[static_cast<std::size_t>(model.assignments[static_cast<std::size_t>(far)])];
      ++counts[static_cast<std::size_t>(c)];
      model.assignments[static_cast<std::size_t>(far)] = c;
      model.centroids.row(c) = emb.vectors.row(far);
    }

    typename ClusterModel<Scalar>::Matrix sums =
        ClusterModel<Scalar>::Matrix::Zero(k, emb.dim());
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(model.assignments[static_cast<std::size_t>(i)]) += emb.vectors.row(i);
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        model.centroids.row(c) =
            sums.row(c) / static_cast<Scalar>(counts[static_cast<std::size_t>(c)]);
      }
    }
    model.inertia_history.push_back(
        compute_inertia(emb, model.centroids, model.assignments));
    model.iterations = iter;

    auto next = detail::assign_nearest(emb, model.centroids);
    if (next == model.assignments) break;
    model.assignments = std::move(next);
  }
  model.inertia = compute_inertia(emb, model.centroids, model.assignments);
  return model;
}

/// From each cluster, the min(k_per, size) ids nearest its centroid; ties by
/// id. Output is grouped by cluster index, nearest first within a cluster.
template <typename Scalar>
std::vector<std::string> topk_per_cluster(const ClusterModel<Scalar>& model,
                                          const EmbeddingMatrix<Scalar>& emb,
                                          std::size_t k_per) {
  if (k_per < 1) throw UsageError("topk_per_cluster: k_per must be >= 1");
  if (model.assignments.size() != emb.ids.size()) {
    throw Error("topk_per_cluster: model does not match embeddings");
  }
  std::vector<std::vector<std::pair<Scalar, std::size_t>>> members(
      static_cast<std::size_t>(model.k));
  for (std::size_t i = 0; i < emb.ids.size(); ++i) {
    const int c = model.assignments[i];
    members[static_cast<std::size_t>(c)].emplace_back(
        squared_distance(emb.vectors.row(static_cast<Eigen::Index>(i)),
                         model.centroids.row(c)),
        i);
  }
  std::vector<std::string> out;
  for (auto& group : members) {
    std::sort(group.begin(), group.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      return emb.ids[a.second] < emb.ids[b.second];
    });
    const std::size_t take = std::min(k_per, group.size());
    for (std::size_t j = 0; j < take; ++j) out.push_back(emb.ids[group[j].second]);
  }
  return out;
}

/// Per-id correctness from an earlier evaluation run.
struct DifficultyTable {
  std::map<std::string, bool> correct;

  /// Mean correctness of each cluster's members that have data; nullopt for
  /// clusters without any.
  template <typename Scalar>
  std::vector<std::optional<double>> cluster_accuracy(
      const ClusterModel<Scalar>& model, const std::vector<std::string>& ids) const {
    std::vector<double> hits(static_cast<std::size_t>(model.k), 0.0);
    std::vector<std::size_t> seen(static_cast<std::size_t>(model.k), 0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto it = correct.find(ids[i]);
      if (it == correct.end()) continue;
      const auto c = static_cast<std::size_t>(model.assignments[i]);
      ++seen[c];
      hits[c] += it->second ? 1.0 : 0.0;
    }
    std::vector<std::optional<double>> acc(static_cast<std::size_t>(model.k));
    for (std::size_t c = 0; c < acc.size(); ++c) {
      if (seen[c] > 0) acc[c] = hits[c] / static_cast<double>(seen[c]);
    }
    return acc;
  }
};

DifficultyTable load_correctness(const std::string& path);

/// Orders ids hardest cluster first: ascending cluster accuracy, then cluster
/// index, then distance to centroid, then id.
template <typename Scalar>
std::vector<std::string> difficulty_sort(const std::vector<std::string>& ids,
                                         const DifficultyTable& table,
                                         const ClusterModel<Scalar>& model,
                                         const EmbeddingMatrix<Scalar>& emb) {
  std::unordered_map<std::string, std::size_t> row;
  for (std::size_t i = 0; i < emb.ids.size(); ++i) row.emplace(emb.ids[i], i);
  const auto accuracy = table.cluster_accuracy(model, emb.ids);

  struct Key {
    double acc;
    int cluster;
    Scalar dist;
    const std::string* id;
  };
  std::vector<Key> keys;
  keys.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = row.find(id);
    if (it == row.end()) {
      throw UsageError("difficulty_sort: id without cluster assignment \"" + id + "\"");
    }
    const int c = model.assignments[it->second];
    const auto& acc = accuracy[static_cast<std::size_t>(c)];
    if (!acc) {
      throw UsageError("difficulty_sort: no correctness data for cluster " +
                       std::to_string(c));
    }
    keys.push_back({*acc, c,
                    squared_distance(emb.vectors.row(static_cast<Eigen::Index>(it->second)),
                                     model.centroids.row(c)),
                    &id});
  }
  std::sort(keys.begin(), keys.end(), [](const Key& a, const Key& b) {
    return std::tie(a.acc, a.cluster, a.dist, *a.id) <
           std::tie(b.acc, b.cluster, b.dist, *b.id);
  });
  std::vector<std::string> out;
  out.reserve(keys.size());
  for (const auto& k : keys) out.push_back(*k.id);
  return out;
}

struct HardSelectOptions {
  int k_clusters = 20;
  /// 0 means ceil(budget / k_clusters).
  std::size_t k_per = 0;
  int max_iter = 100;
};

template <typename Scalar>
struct HardSelection {
  std::vector<std::string> ids;
  /// Size of the nearest-to-centroid pool before the budget cut.
  std::size_t pool_size = 0;
  ClusterModel<Scalar> model;
};

/// kmeans -> topk_per_cluster -> difficulty_sort -> first `budget` ids.
template <typename Scalar>
HardSelection<Scalar> hard_select(const EmbeddingMatrix<Scalar>& emb,
                                  const DifficultyTable& table, std::size_t budget,
                                  std::uint64_t seed,
                                  const HardSelectOptions& options = {}) {
  HardSelection<Scalar> out;
  if (budget == 0) return out;
  const std::size_t k_per =
      options.k_per > 0
          ? options.k_per
          : (budget + static_cast<std::size_t>(options.k_clusters) - 1) /
                static_cast<std::size_t>(std::max(options.k_clusters, 1));
  out.model = kmeans(emb, options.k_clusters, seed, options.max_iter);
  auto pool = topk_per_cluster(out.model, emb, k_per);
  out.pool_size = pool.size();
  out.ids = difficulty_sort(pool, table, out.model, emb);
  if (out.ids.size() > budget) out.ids.resize(budget);
  return out;
}

/// Exactly n distinct ids drawn without replacement, returned in input order.
std::vector<std::string> random_select(const std::vector<std::string>& ids,
                                       std::size_t n, std::uint64_t seed);

/// Embedding cache: one JSON header line {"format", "version", "dimension",
/// "count", "ids"} followed by count*dimension little-endian float32 values,
/// row-major.
void write_embedding_cache(const EmbeddingMatrix<double>& emb, const std::string& path);
EmbeddingMatrix<double> read_embedding_cache(const std::string& path);

}  // namespace recritic

#endif  // RECRITIC_SELECTOR_HPP
