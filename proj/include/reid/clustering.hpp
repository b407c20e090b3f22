#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "reid/rng.hpp"
#include "reid/tensor.hpp"

namespace reid {

enum class Seeding { kGreedy, kRandom };

struct ClusterConfig {
  Index k = 8;
  Index candidates = 0;  // 0 selects 2 + floor(ln k)
  Index max_iter = 100;
  Index batch_size = 512;
  Index early_stop_batches = 50;
  double reassign_ratio = 0.05;
  std::uint64_t seed = 0;
  Seeding seeding = Seeding::kGreedy;

  Index candidate_count() const {
    if (candidates > 0) return candidates;
    return 2 + static_cast<Index>(std::floor(std::log(static_cast<double>(std::max<Index>(k, 1)))));
  }

  void validate() const {
    if (k < 1) throw ConfigError("cluster count k must be >= 1");
    if (candidates < 0) throw ConfigError("candidate count must be >= 1 (or 0 for auto)");
    if (max_iter < 1 || batch_size < 1 || early_stop_batches < 1) {
      throw ConfigError("max_iter, batch_size and early_stop must be >= 1");
    }
    if (!(reassign_ratio >= 0.0 && reassign_ratio <= 1.0)) {
      throw ConfigError("reassign_ratio must lie in [0,1]");
    }
  }
};

template <typename Scalar>
struct ClusterModel {
  Matrix<Scalar> centroids;  // D x k
  Scalar inertia = 0;
  Index epochs = 0;
  Index batches = 0;
};

enum class LabelStream { kGlobal, kTop, kBottom };

inline const char* stream_name(LabelStream s) {
  switch (s) {
    case LabelStream::kGlobal: return "global";
    case LabelStream::kTop: return "top";
    case LabelStream::kBottom: return "bottom";
  }
  return "?";
}

struct PseudoLabels {
  LabelStream stream = LabelStream::kGlobal;
  std::vector<int> labels;
};

// ---------------------------------------------------------------------------
// Costs

/// min over centroids of ||x - c||^2. `centroids` holds one centroid per column.
template <typename VecX, typename MatC>
typename VecX::Scalar point_cost(const Eigen::MatrixBase<VecX>& x,
                                 const Eigen::MatrixBase<MatC>& centroids) {
  using Scalar = typename VecX::Scalar;
  if (centroids.cols() == 0) throw ShapeError("point_cost needs at least one centroid");
  if (centroids.rows() != x.size()) throw ShapeError("point/centroid dimension mismatch");
  Scalar best = std::numeric_limits<Scalar>::infinity();
  for (Index j = 0; j < centroids.cols(); ++j) {
    best = std::min<Scalar>(best, (x - centroids.col(j)).squaredNorm());
  }
  return best;
}

/// Sum of point costs (the K-means inertia).
template <typename Scalar>
Scalar total_cost(const Matrix<Scalar>& points, const Matrix<Scalar>& centroids) {
  Scalar sum = 0;
  for (Index i = 0; i < points.cols(); ++i) sum += point_cost(points.col(i), centroids);
  return sum;
}

namespace detail {

/// Squared distances from every point to one candidate, via direct differences.
template <typename Scalar>
Vector<Scalar> distances_to(const Matrix<Scalar>& points, Index index) {
  return (points.colwise() - points.col(index)).colwise().squaredNorm().transpose();
}

/// Cost of the set after adding `candidate`, given current per-point costs.
template <typename Scalar>
Scalar cost_with(const Matrix<Scalar>& points, const Vector<Scalar>& current, Index candidate) {
  return current.cwiseMin(distances_to(points, candidate)).sum();
}

/// Index drawn with probability weights[i] / sum(weights).
template <typename Scalar>
Index sample_weighted(const Vector<Scalar>& weights, Scalar total, Pcg32& rng) {
  const double r = rng.uniform() * static_cast<double>(total);
  double acc = 0.0;
  Index last_positive = -1;
  for (Index i = 0; i < weights.size(); ++i) {
    if (weights[i] <= Scalar(0)) continue;
    acc += static_cast<double>(weights[i]);
    last_positive = i;
    if (r < acc) return i;
  }
  return last_positive;
}

/// Pairwise squared distances, points x centroids, via the Gram expansion.
template <typename Scalar>
Matrix<Scalar> gram_distances(const Matrix<Scalar>& points, const Matrix<Scalar>& centroids) {
  Matrix<Scalar> d = (-2 * points.transpose() * centroids).eval();
  d.colwise() += points.colwise().squaredNorm().transpose();
  d.rowwise() += centroids.colwise().squaredNorm();
  return d.cwiseMax(Scalar(0));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Seeding

/// Greedy K-means++: each step draws `candidate_count()` candidates with
/// probability D(x, C) / D(X, C) (uniformly for the first centroid, or when
/// every point already coincides with a centroid) and keeps the one that
/// minimises D(X, C + {c}). Returns the chosen column indices.
template <typename Scalar>
std::vector<Index> greedy_seed_indices(const Matrix<Scalar>& points, const ClusterConfig& cfg,
                                       Pcg32& rng) {
  cfg.validate();
  const Index n = points.cols();
  if (n < cfg.k) {
    throw InsufficientDataError("greedy seeding needs at least k = " + std::to_string(cfg.k) +
                                " points, got " + std::to_string(n));
  }
  const Index ell = cfg.candidate_count();
  std::vector<Index> chosen;
  std::vector<char> taken(static_cast<std::size_t>(n), 0);
  Vector<Scalar> current = Vector<Scalar>::Constant(n, std::numeric_limits<Scalar>::infinity());

  auto uniform_untaken = [&]() {
    const Index free = n - static_cast<Index>(chosen.size());
    Index r = static_cast<Index>(rng.below(static_cast<std::uint32_t>(free)));
    for (Index i = 0; i < n; ++i) {
      if (taken[static_cast<std::size_t>(i)]) continue;
      if (r-- == 0) return i;
    }
    return n - 1;
  };

  while (static_cast<Index>(chosen.size()) < cfg.k) {
    const Scalar total = chosen.empty() ? Scalar(0) : current.sum();
    Index best = -1;
    Scalar best_cost = std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < ell; ++j) {
      Index cand = total > Scalar(0) ? detail::sample_weighted(current, total, rng) : uniform_untaken();
      const Scalar cost = detail::cost_with(points, current, cand);
      if (cost < best_cost) {
        best_cost = cost;
        best = cand;
      }
    }
    chosen.push_back(best);
    taken[static_cast<std::size_t>(best)] = 1;
    current = current.cwiseMin(detail::distances_to(points, best));
  }
  return chosen;
}

template <typename Scalar>
Matrix<Scalar> gather_columns(const Matrix<Scalar>& points, const std::vector<Index>& idx) {
  Matrix<Scalar> out(points.rows(), static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Index>(j)) = points.col(idx[j]);
  return out;
}

template <typename Scalar>
Matrix<Scalar> greedy_seed(const Matrix<Scalar>& points, const ClusterConfig& cfg, Pcg32& rng) {
  return gather_columns(points, greedy_seed_indices(points, cfg, rng));
}

/// k distinct points chosen uniformly (ablation baseline).
template <typename Scalar>
Matrix<Scalar> random_seed(const Matrix<Scalar>& points, Index k, Pcg32& rng) {
  const Index n = points.cols();
  if (n < k) throw InsufficientDataError("random seeding needs at least k points");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  for (Index i = 0; i < k; ++i) {
    const Index j = i + static_cast<Index>(rng.below(static_cast<std::uint32_t>(n - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  order.resize(static_cast<std::size_t>(k));
  return gather_columns(points, order);
}

// ---------------------------------------------------------------------------
// Assignment

/// Nearest centroid per point; ties go to the lowest centroid index.
template <typename Scalar>
PseudoLabels assign_labels(const Matrix<Scalar>& points, const Matrix<Scalar>& centroids,
                           LabelStream stream = LabelStream::kGlobal) {
  if (points.rows() != centroids.rows()) throw ShapeError("assign_labels: dimension mismatch");
  if (centroids.cols() == 0) throw ShapeError("assign_labels: no centroids");
  PseudoLabels out{stream, std::vector<int>(static_cast<std::size_t>(points.cols()))};
  for (Index i = 0; i < points.cols(); ++i) {
    Index best = 0;
    Scalar best_d = std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < centroids.cols(); ++j) {
      const Scalar d = (points.col(i) - centroids.col(j)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    out.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

template <typename Scalar>
PseudoLabels assign_labels(const Matrix<Scalar>& points, const ClusterModel<Scalar>& model,
                           LabelStream stream = LabelStream::kGlobal) {
  return assign_labels(points, model.centroids, stream);
}

// ---------------------------------------------------------------------------
// Mini-batch K-means

/// Mini-batch K-means (per-centroid streaming mean, learning rate 1/count).
///
/// Each epoch shuffles the points into batches of `batch_size`. Fitting stops
/// after `max_iter` epochs or once `early_stop_batches` consecutive batches
/// fail to improve the smoothed batch inertia. After every epoch the
/// ceil(reassign_ratio * k) centroids with the fewest assignments in that
/// epoch are moved to points drawn proportionally to their current cost. The returned centroids are the best ones seen on the
/// full set (the init included), so the result never has a higher inertia
/// than `init`.
template <typename Scalar>
ClusterModel<Scalar> minibatch_kmeans(const Matrix<Scalar>& points, const Matrix<Scalar>& init,
                                      const ClusterConfig& cfg, Pcg32& rng) {
  cfg.validate();
  const Index n = points.cols();
  const Index k = init.cols();
  if (k != cfg.k) throw ShapeError("minibatch_kmeans: init must hold k centroids");
  if (init.rows() != points.rows()) throw ShapeError("minibatch_kmeans: dimension mismatch");

  Matrix<Scalar> centroids = init;
  ClusterModel<Scalar> best{init, total_cost(points, init), 0, 0};
  if (n == 0) return best;

  const Index batch = std::min(cfg.batch_size, n);
  std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});

  // Exponentially weighted batch inertia, as in common mini-batch K-means
  // implementations; alpha scales with the batch fraction.
  const double alpha = std::min(1.0, 2.0 * static_cast<double>(batch) / static_cast<double>(n + 1));
  double ewa = -1.0;
  double ewa_best = std::numeric_limits<double>::infinity();
  Index stale = 0;
  bool stop = false;

  Index epoch = 0;
  Index batches = 0;
  while (epoch < cfg.max_iter && !stop) {
    for (Index i = n - 1; i > 0; --i) {
      const Index j = static_cast<Index>(rng.below(static_cast<std::uint32_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    std::vector<double> epoch_counts(static_cast<std::size_t>(k), 0.0);
    for (Index start = 0; start < n && !stop; start += batch) {
      const Index len = std::min(batch, n - start);
      Matrix<Scalar> xb(points.rows(), len);
      for (Index t = 0; t < len; ++t) xb.col(t) = points.col(order[static_cast<std::size_t>(start + t)]);
      const Matrix<Scalar> d = detail::gram_distances(xb, centroids);
      std::vector<Index> label(static_cast<std::size_t>(len));
      double batch_inertia = 0.0;
      for (Index t = 0; t < len; ++t) {
        Index a = 0;
        batch_inertia += static_cast<double>(d.row(t).minCoeff(&a));
        label[static_cast<std::size_t>(t)] = a;
      }
      batch_inertia /= static_cast<double>(len);
      // Per-centroid streaming mean update.
      Matrix<Scalar> sums = Matrix<Scalar>::Zero(points.rows(), k);
      std::vector<double> hits(static_cast<std::size_t>(k), 0.0);
      for (Index t = 0; t < len; ++t) {
        const auto a = static_cast<std::size_t>(label[static_cast<std::size_t>(t)]);
        sums.col(static_cast<Index>(a)) += xb.col(t);
        hits[a] += 1.0;
      }
      for (Index j = 0; j < k; ++j) {
        const auto sj = static_cast<std::size_t>(j);
        if (hits[sj] == 0.0) continue;
        const double total = counts[sj] + hits[sj];
        centroids.col(j) = (centroids.col(j) * static_cast<Scalar>(counts[sj] / total) +
                            sums.col(j) / static_cast<Scalar>(total))
                               .eval();
        counts[sj] = total;
        epoch_counts[sj] += hits[sj];
      }
      ++batches;
      ewa = ewa < 0.0 ? batch_inertia : ewa * (1.0 - alpha) + batch_inertia * alpha;
      if (ewa < ewa_best) {
        ewa_best = ewa;
        stale = 0;
      } else if (++stale >= cfg.early_stop_batches) {
        stop = true;
      }
    }
    ++epoch;

    // Track the best full-set solution before any reassignment.
    const Matrix<Scalar> full = detail::gram_distances(points, centroids);
    const Scalar inertia = full.rowwise().minCoeff().sum();
    if (inertia < best.inertia) {
      best.centroids = centroids;
      best.inertia = inertia;
    }
    if (stop || epoch >= cfg.max_iter || cfg.reassign_ratio <= 0.0) continue;

    // Re-seed the lowest-count centroids.
    const auto quota = static_cast<Index>(std::ceil(cfg.reassign_ratio * static_cast<double>(k)));
    std::vector<Index> reseed(static_cast<std::size_t>(k));
    std::iota(reseed.begin(), reseed.end(), Index{0});
    std::stable_sort(reseed.begin(), reseed.end(), [&](Index a, Index b) {
      return epoch_counts[static_cast<std::size_t>(a)] < epoch_counts[static_cast<std::size_t>(b)];
    });
    reseed.resize(static_cast<std::size_t>(std::min(quota, k)));
    if (reseed.empty()) continue;
    Vector<Scalar> cost = full.rowwise().minCoeff();
    const Scalar total = cost.sum();
    for (Index j : reseed) {
      const Index pick = total > Scalar(0) ? detail::sample_weighted(cost, total, rng)
                                           : static_cast<Index>(rng.below(static_cast<std::uint32_t>(n)));
      centroids.col(j) = points.col(pick);
      counts[static_cast<std::size_t>(j)] = 0.0;
      cost[pick] = 0;
    }
  }
  best.epochs = epoch;
  best.batches = batches;
  best.inertia = total_cost(points, best.centroids);
  return best;
}

/// Seeding followed by mini-batch K-means, both driven by cfg.seed.
template <typename Scalar>
ClusterModel<Scalar> fit_kmeans(const Matrix<Scalar>& points, const ClusterConfig& cfg) {
  Pcg32 rng(cfg.seed);
  Pcg32 seed_rng = rng.split();
  Pcg32 fit_rng = rng.split();
  const Matrix<Scalar> init = cfg.seeding == Seeding::kGreedy ? greedy_seed(points, cfg, seed_rng)
                                                              : random_seed(points, cfg.k, seed_rng);
  return minibatch_kmeans(points, init, cfg, fit_rng);
}

}  // namespace reid
