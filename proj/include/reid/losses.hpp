#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "reid/tensor.hpp"

namespace reid {

struct LossConfig {
  double kappa = 1.0;   // source triplet weight
  double margin = 0.3;  // triplet margin
  double alpha = 1.0;   // target global ID
  double beta = 1.0;    // target global triplet
  double gamma = 0.5;   // target top softmax-triplet
  double delta = 0.5;   // target bottom softmax-triplet

  void validate() const {
    for (double w : {kappa, margin, alpha, beta, gamma, delta}) {
      if (!(w >= 0.0)) throw ConfigError("loss weights and margin must be non-negative");
    }
  }
};

/// Fully connected classifier over a D-dimensional embedding.
template <typename Scalar>
struct ClassifierHead {
  Matrix<Scalar> weight;  // M x D
  Vector<Scalar> bias;    // M

  Index classes() const { return weight.rows(); }
};

/// Columns of `features` are samples; labels[i] belongs to column i.
template <typename Scalar>
struct Batch {
  Matrix<Scalar> features;
  std::vector<int> labels;
};

template <typename Scalar>
struct IdLossResult {
  Scalar loss = 0;
  Matrix<Scalar> d_features;
  Matrix<Scalar> d_weight;
  Vector<Scalar> d_bias;
};

template <typename Scalar>
struct TripletResult {
  Scalar loss = 0;
  Matrix<Scalar> d_features;
};

/// Mean softmax cross-entropy of head logits against labels.
template <typename Scalar>
IdLossResult<Scalar> id_loss(const ClassifierHead<Scalar>& head, const Batch<Scalar>& batch) {
  const Index n = batch.features.cols();
  if (static_cast<std::size_t>(n) != batch.labels.size()) throw ShapeError("id_loss: label count mismatch");
  if (batch.features.rows() != head.weight.cols()) throw ShapeError("id_loss: feature size mismatch");
  const Index m = head.classes();
  for (int y : batch.labels) {
    if (y < 0 || y >= m) throw LabelError("id_loss: label " + std::to_string(y) + " outside [0, M)");
  }
  IdLossResult<Scalar> out;
  if (n == 0) {
    out.d_features = Matrix<Scalar>::Zero(batch.features.rows(), 0);
    out.d_weight = Matrix<Scalar>::Zero(head.weight.rows(), head.weight.cols());
    out.d_bias = Vector<Scalar>::Zero(m);
    return out;
  }
  Matrix<Scalar> logits = head.weight * batch.features;
  logits.colwise() += head.bias;
  Matrix<Scalar> d_logits(m, n);
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar top = logits.col(i).maxCoeff();
    const Vector<Scalar> e = (logits.col(i).array() - top).exp().matrix();
    const Scalar z = e.sum();
    const int y = batch.labels[static_cast<std::size_t>(i)];
    total += std::log(z) - (logits(y, i) - top);
    d_logits.col(i) = e / z;
    d_logits(y, i) -= Scalar(1);
  }
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  d_logits *= inv_n;
  out.loss = total * inv_n;
  out.d_features = head.weight.transpose() * d_logits;
  out.d_weight = d_logits * batch.features.transpose();
  out.d_bias = d_logits.rowwise().sum();
  return out;
}

/// Every label needs a second instance and at least one other label must be
/// present, otherwise hardest-positive/negative mining is undefined.
inline void check_batch_structure(std::span<const int> labels) {
  std::map<int, int> counts;
  for (int y : labels) ++counts[y];
  if (counts.size() < 2) throw BatchStructureError("triplet mining needs at least two identities");
  for (auto [label, count] : counts) {
    if (count < 2) {
      throw BatchStructureError("identity " + std::to_string(label) + " has a single instance");
    }
  }
}

/// Hardest positive (farthest same label, excluding the anchor itself) and
/// hardest negative (nearest other label) per anchor, plain L2 distances.
struct MinedPair {
  Index positive = -1;
  Index negative = -1;
};

template <typename Scalar>
Matrix<Scalar> pairwise_distances(const Matrix<Scalar>& f) {
  const Index n = f.cols();
  Matrix<Scalar> d(n, n);
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < n; ++i) d(i, j) = (f.col(i) - f.col(j)).norm();
  }
  return d;
}

template <typename Scalar>
std::vector<MinedPair> mine_hardest(const Matrix<Scalar>& dist, std::span<const int> labels) {
  const Index n = dist.cols();
  std::vector<MinedPair> pairs(static_cast<std::size_t>(n));
  for (Index a = 0; a < n; ++a) {
    Scalar far = -1;
    Scalar near = std::numeric_limits<Scalar>::infinity();
    auto& pr = pairs[static_cast<std::size_t>(a)];
    for (Index j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (dist(a, j) > far) {
          far = dist(a, j);
          pr.positive = j;
        }
      } else if (dist(a, j) < near) {
        near = dist(a, j);
        pr.negative = j;
      }
    }
  }
  return pairs;
}

namespace detail {

/// Adds w * d||f_a - f_b|| / d(f_a, f_b) into grads (zero at coincidence).
template <typename Scalar>
void add_distance_grad(Matrix<Scalar>& grads, const Matrix<Scalar>& f, Index a, Index b, Scalar dist,
                       Scalar w) {
  if (!(dist > Scalar(0))) return;
  const Vector<Scalar> u = (f.col(a) - f.col(b)) / dist;
  grads.col(a) += w * u;
  grads.col(b) -= w * u;
}

}  // namespace detail

/// Batch-hard triplet loss: mean over anchors of max(0, d+ - d- + margin).
template <typename Scalar>
TripletResult<Scalar> hard_triplet_loss(const Batch<Scalar>& batch, Scalar margin) {
  check_batch_structure(batch.labels);
  const auto& f = batch.features;
  const Index n = f.cols();
  const Matrix<Scalar> dist = pairwise_distances(f);
  const auto pairs = mine_hardest(dist, batch.labels);
  TripletResult<Scalar> out{0, Matrix<Scalar>::Zero(f.rows(), n)};
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  for (Index a = 0; a < n; ++a) {
    const auto [p, q] = pairs[static_cast<std::size_t>(a)];
    const Scalar hinge = dist(a, p) - dist(a, q) + margin;
    if (hinge <= Scalar(0)) continue;
    out.loss += hinge * inv_n;
    detail::add_distance_grad(out.d_features, f, a, p, dist(a, p), inv_n);
    detail::add_distance_grad(out.d_features, f, a, q, dist(a, q), -inv_n);
  }
  return out;
}

/// Softmax triplet loss on the hardest pair:
/// -log(e^{d-} / (e^{d-} + e^{d+})) = softplus(d+ - d-), averaged over anchors.
template <typename Scalar>
TripletResult<Scalar> softmax_triplet_loss(const Batch<Scalar>& batch) {
  check_batch_structure(batch.labels);
  const auto& f = batch.features;
  const Index n = f.cols();
  const Matrix<Scalar> dist = pairwise_distances(f);
  const auto pairs = mine_hardest(dist, batch.labels);
  TripletResult<Scalar> out{0, Matrix<Scalar>::Zero(f.rows(), n)};
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  for (Index a = 0; a < n; ++a) {
    const auto [p, q] = pairs[static_cast<std::size_t>(a)];
    const Scalar gap = dist(a, p) - dist(a, q);
    // log(1 + e^gap) without overflow.
    const Scalar softplus = gap > Scalar(0) ? gap + std::log1p(std::exp(-gap)) : std::log1p(std::exp(gap));
    const Scalar slope = gap >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-gap))
                                          : std::exp(gap) / (Scalar(1) + std::exp(gap));
    out.loss += softplus * inv_n;
    detail::add_distance_grad(out.d_features, f, a, p, dist(a, p), slope * inv_n);
    detail::add_distance_grad(out.d_features, f, a, q, dist(a, q), -slope * inv_n);
  }
  return out;
}

inline double source_total(double id, double triplet, double kappa) { return id + kappa * triplet; }

inline double target_total(double id_global, double triplet_global, double triplet_top,
                           double triplet_bottom, const LossConfig& cfg) {
  return cfg.alpha * id_global + cfg.beta * triplet_global + cfg.gamma * triplet_top +
         cfg.delta * triplet_bottom;
}

}  // namespace reid
