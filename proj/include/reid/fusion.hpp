#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "reid/rng.hpp"
#include "reid/tensor.hpp"

namespace reid {

inline constexpr double kBatchNormEpsilon = 1e-5;

template <typename Scalar>
struct DenseLayer {
  Matrix<Scalar> weight;  // out x in
  Vector<Scalar> bias;    // out
};

/// Sizes s_0..s_h of the shared MLP: (h-1)/2 reducing maps (floor by r, never
/// below 1), the mirrored (h-1)/2 expanding maps back to C, then one final
/// C -> C map. h must be odd.
inline std::vector<Index> smp_layer_sizes(Index channels, Index reduction, Index hidden_layers) {
  if (channels < 1) throw ShapeError("SMP needs at least one channel");
  if (reduction < 1) throw ShapeError("SMP reduction rate must be >= 1");
  if (hidden_layers < 1 || hidden_layers % 2 == 0) {
    throw ShapeError("SMP hidden layer count must be odd and positive");
  }
  const Index half = (hidden_layers - 1) / 2;
  std::vector<Index> sizes{channels};
  for (Index k = 0; k < half; ++k) sizes.push_back(std::max<Index>(1, sizes.back() / reduction));
  for (Index k = half - 1; k >= 0; --k) sizes.push_back(sizes[static_cast<std::size_t>(k)]);
  sizes.push_back(channels);
  return sizes;
}

template <typename Scalar>
struct SmpParams {
  std::vector<DenseLayer<Scalar>> layers;
  Index channels = 0;
  Index reduction = 1;
  Index hidden_layers = 1;

  static SmpParams Zero(Index c, Index r, Index h) {
    SmpParams p{{}, c, r, h};
    const auto sizes = smp_layer_sizes(c, r, h);
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
      p.layers.push_back({Matrix<Scalar>::Zero(sizes[k + 1], sizes[k]),
                          Vector<Scalar>::Zero(sizes[k + 1])});
    }
    return p;
  }

  /// Glorot-uniform weights, zero biases.
  static SmpParams Random(Index c, Index r, Index h, Pcg32& rng) {
    SmpParams p = Zero(c, r, h);
    for (auto& layer : p.layers) {
      const double bound = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
      for (Index j = 0; j < layer.weight.cols(); ++j) {
        for (Index i = 0; i < layer.weight.rows(); ++i) {
          layer.weight(i, j) = static_cast<Scalar>(rng.uniform(-bound, bound));
        }
      }
    }
    return p;
  }

  SmpParams zeros_like() const { return Zero(channels, reduction, hidden_layers); }

  void validate() const {
    const auto sizes = smp_layer_sizes(channels, reduction, hidden_layers);
    if (layers.size() + 1 != sizes.size()) throw ShapeError("SMP layer count mismatch");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      if (layers[k].weight.rows() != sizes[k + 1] || layers[k].weight.cols() != sizes[k] ||
          layers[k].bias.size() != sizes[k + 1]) {
        throw ShapeError("SMP layer " + std::to_string(k) + " has the wrong shape");
      }
    }
  }

  SmpParams& operator+=(const SmpParams& other) {
    for (std::size_t k = 0; k < layers.size(); ++k) {
      layers[k].weight += other.layers[k].weight;
      layers[k].bias += other.layers[k].bias;
    }
    return *this;
  }
};

/// Inference-mode batch normalisation with stored statistics.
template <typename Scalar>
struct BatchNormParams {
  Vector<Scalar> running_mean;
  Vector<Scalar> running_var;
  Vector<Scalar> scale;
  Vector<Scalar> shift;

  static BatchNormParams Identity(Index c) {
    return {Vector<Scalar>::Zero(c), Vector<Scalar>::Ones(c), Vector<Scalar>::Ones(c),
            Vector<Scalar>::Zero(c)};
  }

  Vector<Scalar> inv_std() const {
    return (running_var.array() + Scalar(kBatchNormEpsilon)).rsqrt().matrix();
  }

  Vector<Scalar> apply(const Vector<Scalar>& x) const {
    if (x.size() != running_mean.size()) throw ShapeError("batch norm channel mismatch");
    return (((x - running_mean).array() * inv_std().array()) * scale.array() + shift.array())
        .matrix();
  }
};

template <typename Scalar>
struct FusionParams {
  SmpParams<Scalar> ecab_top;
  SmpParams<Scalar> ecab_bottom;
  SmpParams<Scalar> secab_global;
  BatchNormParams<Scalar> bn_top;
  BatchNormParams<Scalar> bn_bottom;

  Index channels() const { return secab_global.channels; }
};

template <typename Scalar>
struct FusionOutput {
  Vector<Scalar> theta_top;
  Vector<Scalar> theta_bottom;
  FeatureMap<Scalar> tau_top_map;
  FeatureMap<Scalar> tau_bot_map;
};

// ---------------------------------------------------------------------------
// Shared MLP

template <typename Scalar>
struct SmpTrace {
  std::vector<Vector<Scalar>> inputs;  // input of layer k
  std::vector<Vector<Scalar>> pre;     // pre-activation of layer k
};

/// Affine maps with ReLU between them; the last map stays linear.
template <typename Scalar>
Vector<Scalar> smp_forward(const SmpParams<Scalar>& params, const Vector<Scalar>& v,
                           SmpTrace<Scalar>* trace = nullptr) {
  if (v.size() != params.channels) throw ShapeError("SMP input length must equal C");
  if (trace) {
    trace->inputs.clear();
    trace->pre.clear();
  }
  Vector<Scalar> x = v;
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const auto& layer = params.layers[k];
    Vector<Scalar> z = layer.weight * x + layer.bias;
    if (trace) {
      trace->inputs.push_back(x);
      trace->pre.push_back(z);
    }
    x = (k + 1 < params.layers.size()) ? Vector<Scalar>(z.cwiseMax(Scalar(0))) : z;
  }
  return x;
}

/// Accumulates parameter gradients into `grads` (may be null) and returns
/// the gradient with respect to the SMP input.
template <typename Scalar>
Vector<Scalar> smp_backward(const SmpParams<Scalar>& params, const SmpTrace<Scalar>& trace,
                            const Vector<Scalar>& grad_out, SmpParams<Scalar>* grads) {
  Vector<Scalar> g = grad_out;
  for (std::size_t k = params.layers.size(); k-- > 0;) {
    if (k + 1 < params.layers.size()) {
      g = (trace.pre[k].array() > Scalar(0)).select(g, Scalar(0));
    }
    if (grads) {
      grads->layers[k].weight.noalias() += g * trace.inputs[k].transpose();
      grads->layers[k].bias += g;
    }
    g = params.layers[k].weight.transpose() * g;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling, masks and attention blocks

/// Per-channel spatial max and mean.
template <typename Scalar>
std::pair<Vector<Scalar>, Vector<Scalar>> channel_pool(const FeatureMap<Scalar>& map) {
  return {map.data().rowwise().maxCoeff(), map.data().rowwise().mean()};
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
struct MaskTrace {
  Vector<Scalar> max;
  Vector<Scalar> avg;
  std::vector<Index> argmax;
  SmpTrace<Scalar> max_trace;
  SmpTrace<Scalar> avg_trace;
  Vector<Scalar> mask;
};

/// sigmoid(SMP(max-pool) + SMP(avg-pool)), one weight per channel.
template <typename Scalar>
Vector<Scalar> attention_mask(const SmpParams<Scalar>& params, const FeatureMap<Scalar>& map,
                              MaskTrace<Scalar>* trace = nullptr) {
  if (map.channels() != params.channels) throw ShapeError("attention input channel mismatch");
  auto [mx, avg] = channel_pool(map);
  SmpTrace<Scalar>* max_trace = trace ? &trace->max_trace : nullptr;
  SmpTrace<Scalar>* avg_trace = trace ? &trace->avg_trace : nullptr;
  const Vector<Scalar> logits = smp_forward(params, mx, max_trace) + smp_forward(params, avg, avg_trace);
  Vector<Scalar> mask = logits.unaryExpr([](Scalar x) { return sigmoid(x); });
  if (trace) {
    trace->argmax.resize(static_cast<std::size_t>(map.channels()));
    for (Index c = 0; c < map.channels(); ++c) {
      Index at = 0;
      map.data().row(c).maxCoeff(&at);
      trace->argmax[static_cast<std::size_t>(c)] = at;
    }
    trace->max = std::move(mx);
    trace->avg = std::move(avg);
    trace->mask = mask;
  }
  return mask;
}

namespace detail {

/// Routes pooled-vector gradients back onto the map: the max path to the
/// first maximising position, the mean path uniformly.
template <typename Scalar>
FeatureMap<Scalar> unpool(const FeatureMap<Scalar>& like, const std::vector<Index>& argmax,
                          const Vector<Scalar>& d_max, const Vector<Scalar>& d_avg) {
  FeatureMap<Scalar> d(like.channels(), like.height(), like.width());
  const Scalar inv = Scalar(1) / static_cast<Scalar>(like.spatial());
  for (Index c = 0; c < like.channels(); ++c) {
    d.data().row(c).setConstant(d_avg[c] * inv);
    d.data()(c, argmax[static_cast<std::size_t>(c)]) += d_max[c];
  }
  return d;
}

}  // namespace detail

template <typename Scalar>
FeatureMap<Scalar> attention_mask_backward(const SmpParams<Scalar>& params,
                                           const FeatureMap<Scalar>& map,
                                           const MaskTrace<Scalar>& trace,
                                           const Vector<Scalar>& d_mask, SmpParams<Scalar>* grads) {
  const Vector<Scalar> d_logits =
      (d_mask.array() * trace.mask.array() * (Scalar(1) - trace.mask.array())).matrix();
  const Vector<Scalar> d_max = smp_backward(params, trace.max_trace, d_logits, grads);
  const Vector<Scalar> d_avg = smp_backward(params, trace.avg_trace, d_logits, grads);
  return detail::unpool(map, trace.argmax, d_max, d_avg);
}

/// mask * (max-pool + avg-pool).
template <typename Scalar>
Vector<Scalar> ecab(const SmpParams<Scalar>& params, const FeatureMap<Scalar>& zeta,
                    MaskTrace<Scalar>* trace = nullptr) {
  MaskTrace<Scalar> local;
  MaskTrace<Scalar>* t = trace ? trace : &local;
  const Vector<Scalar> mask = attention_mask(params, zeta, t);
  return (mask.array() * (t->max + t->avg).array()).matrix();
}

template <typename Scalar>
FeatureMap<Scalar> ecab_backward(const SmpParams<Scalar>& params, const FeatureMap<Scalar>& zeta,
                                 const MaskTrace<Scalar>& trace, const Vector<Scalar>& d_out,
                                 SmpParams<Scalar>* grads) {
  const Vector<Scalar> d_mask = (d_out.array() * (trace.max + trace.avg).array()).matrix();
  const Vector<Scalar> d_sum = (d_out.array() * trace.mask.array()).matrix();
  FeatureMap<Scalar> d = attention_mask_backward(params, zeta, trace, d_mask, grads);
  d.data() += detail::unpool(zeta, trace.argmax, d_sum, d_sum).data();
  return d;
}

/// Attention mask only; the caller does the reweighting.
template <typename Scalar>
Vector<Scalar> secab(const SmpParams<Scalar>& params, const FeatureMap<Scalar>& tau,
                     MaskTrace<Scalar>* trace = nullptr) {
  return attention_mask(params, tau, trace);
}

template <typename Scalar>
FeatureMap<Scalar> secab_backward(const SmpParams<Scalar>& params, const FeatureMap<Scalar>& tau,
                                  const MaskTrace<Scalar>& trace, const Vector<Scalar>& d_mask,
                                  SmpParams<Scalar>* grads) {
  return attention_mask_backward(params, tau, trace, d_mask, grads);
}

// ---------------------------------------------------------------------------
// Splitting and pooling of the global map

/// Top gets rows [0, ceil(H/2)), bottom the rest.
template <typename Scalar>
std::pair<FeatureMap<Scalar>, FeatureMap<Scalar>> split_map(const FeatureMap<Scalar>& map) {
  if (map.height() < 2) throw ShapeError("split_map needs H >= 2");
  const Index top_rows = (map.height() + 1) / 2;
  return {map.row_band(0, top_rows), map.row_band(top_rows, map.height() - top_rows)};
}

/// Inverse of split_map.
template <typename Scalar>
FeatureMap<Scalar> stack_rows(const FeatureMap<Scalar>& top, const FeatureMap<Scalar>& bottom) {
  if (top.channels() != bottom.channels() || top.width() != bottom.width()) {
    throw ShapeError("stack_rows: incompatible halves");
  }
  typename FeatureMap<Scalar>::Storage s(top.channels(), top.spatial() + bottom.spatial());
  s << top.data(), bottom.data();
  return FeatureMap<Scalar>(top.height() + bottom.height(), top.width(), std::move(s));
}

template <typename Scalar>
struct PooledStreams {
  Vector<Scalar> global;
  Vector<Scalar> top;
  Vector<Scalar> bottom;
};

/// GAP of the whole map and of its two halves.
template <typename Scalar>
PooledStreams<Scalar> pool_streams(const FeatureMap<Scalar>& map) {
  auto [top, bottom] = split_map(map);
  return {global_average_pool(map), global_average_pool(top), global_average_pool(bottom)};
}

/// Multiplies every spatial position of channel c by weights[c].
template <typename Scalar>
FeatureMap<Scalar> scale_channels(const FeatureMap<Scalar>& map, const Vector<Scalar>& weights) {
  if (weights.size() != map.channels()) throw ShapeError("channel weight length mismatch");
  typename FeatureMap<Scalar>::Storage s = weights.asDiagonal() * map.data();
  return FeatureMap<Scalar>(map.height(), map.width(), std::move(s));
}

// ---------------------------------------------------------------------------
// Ensemble fusion

struct FusionOptions {
  bool use_secab = true;
};

template <typename Scalar>
struct FusionTrace {
  MaskTrace<Scalar> top;
  MaskTrace<Scalar> bottom;
  MaskTrace<Scalar> global;
  Vector<Scalar> psi_top;
  Vector<Scalar> psi_bottom;
  Vector<Scalar> secab_mask;  // all ones when SECAB is disabled
  Vector<Scalar> tau_gap;
  Vector<Scalar> pooled_top;     // GAP of tau_top_map, pre batch norm
  Vector<Scalar> pooled_bottom;
  bool use_secab = true;
};

/// Student halves zeta_top/zeta_bottom go through ECAB, the teacher map
/// tau_global through SECAB; the fused maps are ECAB(zeta_l) * tau * SECAB(tau)
/// (channel broadcast) and theta_l = BN(GAP(fused map)).
template <typename Scalar>
FusionOutput<Scalar> ensemble_fusion(const FusionParams<Scalar>& fp,
                                     const FeatureMap<Scalar>& zeta_top,
                                     const FeatureMap<Scalar>& zeta_bottom,
                                     const FeatureMap<Scalar>& tau_global,
                                     FusionOptions options = {},
                                     FusionTrace<Scalar>* trace = nullptr) {
  const Index c = fp.channels();
  if (zeta_top.channels() != c || zeta_bottom.channels() != c || tau_global.channels() != c) {
    throw ShapeError("ensemble fusion inputs must share the fusion channel count");
  }
  FusionTrace<Scalar> local;
  FusionTrace<Scalar>* t = trace ? trace : &local;
  t->use_secab = options.use_secab;
  t->secab_mask = options.use_secab ? secab(fp.secab_global, tau_global, &t->global)
                                    : Vector<Scalar>(Vector<Scalar>::Ones(c));
  t->psi_top = ecab(fp.ecab_top, zeta_top, &t->top);
  t->psi_bottom = ecab(fp.ecab_bottom, zeta_bottom, &t->bottom);
  t->tau_gap = global_average_pool(tau_global);

  const FeatureMap<Scalar> tau_prime = scale_channels(tau_global, t->secab_mask);
  FusionOutput<Scalar> out;
  out.tau_top_map = scale_channels(tau_prime, t->psi_top);
  out.tau_bot_map = scale_channels(tau_prime, t->psi_bottom);
  t->pooled_top = global_average_pool(out.tau_top_map);
  t->pooled_bottom = global_average_pool(out.tau_bot_map);
  out.theta_top = fp.bn_top.apply(t->pooled_top);
  out.theta_bottom = fp.bn_bottom.apply(t->pooled_bottom);
  return out;
}

template <typename Scalar>
struct FusionGradients {
  FusionParams<Scalar> params;  // running statistics entries stay zero
  FeatureMap<Scalar> d_zeta_top;
  FeatureMap<Scalar> d_zeta_bottom;
  FeatureMap<Scalar> d_tau_global;
};

template <typename Scalar>
FusionParams<Scalar> zero_fusion_like(const FusionParams<Scalar>& fp) {
  const Index c = fp.channels();
  auto zero_bn = [c]() {
    return BatchNormParams<Scalar>{Vector<Scalar>::Zero(c), Vector<Scalar>::Zero(c),
                                   Vector<Scalar>::Zero(c), Vector<Scalar>::Zero(c)};
  };
  return {fp.ecab_top.zeros_like(), fp.ecab_bottom.zeros_like(), fp.secab_global.zeros_like(),
          zero_bn(), zero_bn()};
}

template <typename Scalar>
FusionGradients<Scalar> ensemble_fusion_backward(const FusionParams<Scalar>& fp,
                                                 const FeatureMap<Scalar>& zeta_top,
                                                 const FeatureMap<Scalar>& zeta_bottom,
                                                 const FeatureMap<Scalar>& tau_global,
                                                 const FusionTrace<Scalar>& trace,
                                                 const Vector<Scalar>& d_theta_top,
                                                 const Vector<Scalar>& d_theta_bottom) {
  FusionGradients<Scalar> g{zero_fusion_like(fp), {}, {}, {}};
  const Index c = fp.channels();
  Vector<Scalar> d_mask = Vector<Scalar>::Zero(c);
  Vector<Scalar> d_tau_gap = Vector<Scalar>::Zero(c);

  auto branch = [&](const BatchNormParams<Scalar>& bn, BatchNormParams<Scalar>& d_bn,
                    const Vector<Scalar>& pooled, const Vector<Scalar>& psi,
                    const Vector<Scalar>& d_theta) {
    const Vector<Scalar> inv = bn.inv_std();
    d_bn.shift += d_theta;
    d_bn.scale += (d_theta.array() * (pooled - bn.running_mean).array() * inv.array()).matrix();
    const Vector<Scalar> d_pooled = (d_theta.array() * bn.scale.array() * inv.array()).matrix();
    // pooled = psi * mask * gap(tau)
    d_mask += (d_pooled.array() * psi.array() * trace.tau_gap.array()).matrix();
    d_tau_gap += (d_pooled.array() * psi.array() * trace.secab_mask.array()).matrix();
    return Vector<Scalar>((d_pooled.array() * trace.secab_mask.array() * trace.tau_gap.array()).matrix());
  };
  const Vector<Scalar> d_psi_top =
      branch(fp.bn_top, g.params.bn_top, trace.pooled_top, trace.psi_top, d_theta_top);
  const Vector<Scalar> d_psi_bottom = branch(fp.bn_bottom, g.params.bn_bottom, trace.pooled_bottom,
                                             trace.psi_bottom, d_theta_bottom);

  g.d_zeta_top = ecab_backward(fp.ecab_top, zeta_top, trace.top, d_psi_top, &g.params.ecab_top);
  g.d_zeta_bottom =
      ecab_backward(fp.ecab_bottom, zeta_bottom, trace.bottom, d_psi_bottom, &g.params.ecab_bottom);

  g.d_tau_global = FeatureMap<Scalar>(c, tau_global.height(), tau_global.width());
  const Scalar inv_spatial = Scalar(1) / static_cast<Scalar>(tau_global.spatial());
  for (Index ch = 0; ch < c; ++ch) g.d_tau_global.data().row(ch).setConstant(d_tau_gap[ch] * inv_spatial);
  if (trace.use_secab) {
    g.d_tau_global.data() +=
        secab_backward(fp.secab_global, tau_global, trace.global, d_mask, &g.params.secab_global).data();
  }
  return g;
}

// ---------------------------------------------------------------------------
// Bidirectional mean feature normalisation

/// ((F + F') / 2) / ||(F + F') / 2||.
template <typename Scalar>
Vector<Scalar> bmfn(const Vector<Scalar>& f, const Vector<Scalar>& f_flip) {
  if (f.size() != f_flip.size()) throw ShapeError("bmfn inputs must have equal length");
  const Vector<Scalar> mean = (f + f_flip) / Scalar(2);
  const Scalar n = mean.norm();
  if (!(n > Scalar(0))) throw DegenerateInputError("bmfn: mean of the pair is the zero vector");
  return mean / n;
}

/// Gradient with respect to each input (the two are equal).
template <typename Scalar>
Vector<Scalar> bmfn_backward(const Vector<Scalar>& f, const Vector<Scalar>& f_flip,
                             const Vector<Scalar>& d_out) {
  const Vector<Scalar> mean = (f + f_flip) / Scalar(2);
  const Scalar n = mean.norm();
  const Vector<Scalar> unit = mean / n;
  const Vector<Scalar> d_mean = (d_out - unit * unit.dot(d_out)) / n;
  return d_mean / Scalar(2);
}

/// Inference descriptor: [GAP(top) | GAP(bottom) | GAP(map)], L2-normalised
/// per view, then BMFN across the original and flipped views.
template <typename Scalar>
Vector<Scalar> inference_feature(const FeatureMap<Scalar>& map, const FeatureMap<Scalar>& map_flipped) {
  if (!map.same_shape(map_flipped)) throw ShapeError("inference_feature: map shapes differ");
  auto describe = [](const FeatureMap<Scalar>& m) {
    const auto pooled = pool_streams(m);
    Vector<Scalar> cat(3 * m.channels());
    cat << pooled.top, pooled.bottom, pooled.global;
    return l2_normalized(cat);
  };
  return bmfn(describe(map), describe(map_flipped));
}

}  // namespace reid
