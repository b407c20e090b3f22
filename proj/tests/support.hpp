#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "reid/rng.hpp"

namespace reid::testing {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTolerance = 1e-4;

struct FdResult {
  double rel_error = 0;
  bool smooth = true;  // false when a kink lies within the probe
  double analytic_norm = 0;
};

/// Central differences of f over the given coordinates, compared with the
/// analytic gradient entries in the same order. The probe is repeated with a
/// ten times larger step; disagreement between the two flags the fixture as
/// touching a non-differentiable point.
inline FdResult fd_check(const std::function<double()>& f, const std::vector<double*>& coords,
                         const Eigen::VectorXd& analytic, double h = kFdStep) {
  auto probe = [&](double step) {
    Eigen::VectorXd g(static_cast<Eigen::Index>(coords.size()));
    for (std::size_t i = 0; i < coords.size(); ++i) {
      double& x = *coords[i];
      const double keep = x;
      x = keep + step;
      const double up = f();
      x = keep - step;
      const double down = f();
      x = keep;
      g[static_cast<Eigen::Index>(i)] = (up - down) / (2 * step);
    }
    return g;
  };
  const Eigen::VectorXd fine = probe(h);
  const Eigen::VectorXd coarse = probe(10 * h);
  const double scale = std::max({analytic.norm(), fine.norm(), 1e-12});
  FdResult r;
  r.analytic_norm = analytic.norm();
  r.rel_error = (analytic - fine).norm() / scale;
  r.smooth = (fine - coarse).norm() <= 1e-3 * scale;
  return r;
}

/// Pointers to every coefficient of a dense object.
template <typename Derived>
void add_coords(std::vector<double*>& coords, Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) coords.push_back(&m.derived().coeffRef(i, j));
  }
}

template <typename Derived>
void add_values(std::vector<double>& out, const Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(m(i, j));
  }
}

inline Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, Pcg32& rng, double scale = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * rng.normal();
  }
  return m;
}

/// Labels 0..p-1, k of each, in blocks.
inline std::vector<int> block_labels(int p, int k) {
  std::vector<int> y;
  for (int a = 0; a < p; ++a) y.insert(y.end(), static_cast<std::size_t>(k), a);
  return y;
}

// ---------------------------------------------------------------------------
// Retrieval oracle: plain sort and counting, no shared code with eval.cpp.

struct OracleRanking {
  std::vector<int> relevant;  // in rank order
};

inline OracleRanking oracle_rank(const Eigen::VectorXd& q, int q_id, int q_cam, const Eigen::MatrixXd& g,
                                 const std::vector<int>& g_id, const std::vector<int>& g_cam, bool filter) {
  std::vector<std::pair<double, int>> keyed;
  for (int j = 0; j < static_cast<int>(g.cols()); ++j) {
    if (filter && g_id[static_cast<std::size_t>(j)] == q_id && g_cam[static_cast<std::size_t>(j)] == q_cam) continue;
    double d = 0;
    for (Eigen::Index r = 0; r < g.rows(); ++r) d += (g(r, j) - q[r]) * (g(r, j) - q[r]);
    keyed.emplace_back(d, j);
  }
  std::sort(keyed.begin(), keyed.end());
  OracleRanking out;
  for (auto [d, j] : keyed) out.relevant.push_back(g_id[static_cast<std::size_t>(j)] == q_id ? 1 : 0);
  return out;
}

inline double oracle_precision_at(const OracleRanking& r, std::size_t k) {
  int hits = 0;
  for (std::size_t i = 0; i < k; ++i) hits += r.relevant[i];
  return static_cast<double>(hits) / static_cast<double>(k);
}

inline double oracle_ap(const OracleRanking& r, bool paper_literal) {
  double sum = 0;
  int total = 0;
  for (std::size_t k = 1; k <= r.relevant.size(); ++k) {
    if (!r.relevant[k - 1]) continue;
    sum += oracle_precision_at(r, k);
    ++total;
  }
  return sum / (paper_literal ? static_cast<double>(r.relevant.size()) : static_cast<double>(total));
}

inline bool oracle_hit_within(const OracleRanking& r, std::size_t k) {
  for (std::size_t i = 0; i < std::min(k, r.relevant.size()); ++i) {
    if (r.relevant[i]) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Clustering oracle: every assignment of n points to k non-empty groups.

inline double partition_cost(const Eigen::MatrixXd& x, const std::vector<int>& assign, int k) {
  double cost = 0;
  for (int c = 0; c < k; ++c) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(x.rows());
    int count = 0;
    for (std::size_t i = 0; i < assign.size(); ++i) {
      if (assign[i] != c) continue;
      mean += x.col(static_cast<Eigen::Index>(i));
      ++count;
    }
    if (count == 0) return std::numeric_limits<double>::infinity();
    mean /= count;
    for (std::size_t i = 0; i < assign.size(); ++i) {
      if (assign[i] == c) cost += (x.col(static_cast<Eigen::Index>(i)) - mean).squaredNorm();
    }
  }
  return cost;
}

inline double brute_force_kmeans_cost(const Eigen::MatrixXd& x, int k) {
  const auto n = static_cast<std::size_t>(x.cols());
  std::vector<int> assign(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    best = std::min(best, partition_cost(x, assign, k));
    std::size_t i = 0;
    while (i < n && ++assign[i] == k) assign[i++] = 0;
    if (i == n) break;
  }
  return best;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace reid::testing
