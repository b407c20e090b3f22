#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "reid/fusion.hpp"
#include "reid/losses.hpp"
#include "reid/rng.hpp"
#include "reid/teacher.hpp"

namespace reid {

/// Shape of the desk-scale encoder: input vector -> ReLU affine layer(s) ->
/// C x H x W feature map.
struct BackboneConfig {
  Index input_dim = 32;
  Index channels = 16;
  Index height = 4;
  Index width = 2;
  Index depth = 1;    // 1 or 2 encoder layers
  Index hidden = 64;  // width of the first layer when depth == 2
  Index reduction = 4;
  Index smp_layers = 5;
  Index classes = 64;

  Index map_size() const { return channels * height * width; }
  Index top_rows() const { return (height + 1) / 2; }
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

/// Coordinate reversal, the desk stand-in for a horizontal image flip.
inline Eigen::VectorXd flip_input(const Eigen::VectorXd& x) { return x.reverse(); }
inline Eigen::MatrixXd flip_inputs(const Eigen::MatrixXd& x) { return x.colwise().reverse(); }

/// Pooled streams for a batch, one column per sample.
struct PooledBatch {
  Eigen::MatrixXd global;  // C x n
  Eigen::MatrixXd top;
  Eigen::MatrixXd bottom;
};

/// Activations cached by forward_batch for one backward pass.
struct Activations {
  std::vector<Eigen::MatrixXd> inputs;  // input of each encoder layer
  std::vector<Eigen::MatrixXd> pre;     // pre-activation of each encoder layer
  Eigen::MatrixXd maps;                 // flattened maps, CHW x n
  std::uint64_t store_identity = 0;
  std::uint64_t store_revision = 0;

  Index samples() const { return maps.cols(); }
};

class DeskBackbone {
 public:
  DeskBackbone(BackboneConfig config, ParameterStore params);

  /// Glorot-uniform encoder, head and SMP weights; zero biases; identity
  /// batch norm.
  static DeskBackbone initialize(const BackboneConfig& config, Pcg32& rng);

  /// Names every entry a model with this config registers, with shapes.
  static std::vector<std::pair<std::string, std::pair<Index, Index>>> layout(const BackboneConfig& config);

  const BackboneConfig& config() const { return config_; }
  const ParameterStore& params() const { return params_; }
  ParameterStore& params() { return params_; }

  FeatureMap<double> encode(const Eigen::VectorXd& x) const;

  struct Output {
    FeatureMap<double> map;
    Eigen::VectorXd global;
    Eigen::VectorXd top;
    Eigen::VectorXd bottom;
  };
  Output forward(const Eigen::VectorXd& x) const;

  /// Columns of `inputs` are samples.
  Activations forward_batch(const Eigen::MatrixXd& inputs) const;
  FeatureMap<double> map_at(const Activations& acts, Index sample) const;
  PooledBatch pool(const Activations& acts) const;

  /// Gradients for every registered parameter given dLoss/dmap (CHW x n).
  /// Entries not on the encoder path come back as zeros.
  ParameterStore backward_maps(const Activations& acts, const Eigen::MatrixXd& d_maps) const;
  /// Same, starting from gradients on the pooled global/top/bottom streams.
  ParameterStore backward(const Activations& acts, const PooledBatch& d_pooled) const;

  ClassifierHead<double> head() const;
  /// Replaces the classifier (the class count may change).
  void set_head(const ClassifierHead<double>& head);

  FusionParams<double> fusion() const;
  void set_fusion(const FusionParams<double>& fusion);

 private:
  BackboneConfig config_;
  ParameterStore params_;
};

/// Flattens SMP/BN gradients into store-named entries of `grads`.
void accumulate_fusion_grads(ParameterStore& grads, const FusionParams<double>& d_fusion);

struct OptimizerState {
  ParameterStore first_moment;
  ParameterStore second_moment;
  std::int64_t step = 0;
  double learning_rate = 3.5e-4;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static OptimizerState for_params(const ParameterStore& params, double learning_rate,
                                   double weight_decay);
  /// Drops the moments of one entry, e.g. after the head was resized.
  void reset_entry(const std::string& name, Index rows, Index cols);
};

/// Adam with decoupled weight decay (lr * wd * theta). Buffers are skipped.
void adam_step(ParameterStore& params, const ParameterStore& grads, OptimizerState& state);

}  // namespace reid
