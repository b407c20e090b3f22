#pragma once

#include <functional>
#include <string>
#include <vector>

#include "reid/deskmodel.hpp"
#include "reid/fusion.hpp"
#include "reid/losses.hpp"
#include "reid/pipeline.hpp"
#include "support.hpp"

namespace reid::testing {

// Each builder draws one random fixture and compares its analytic gradient
// against central differences. Fixtures are regenerated until they are
// differentiable around the probe (see fd_check) and have a non-zero
// gradient.

inline void add_smp_coords(std::vector<double*>& coords, SmpParams<double>& p) {
  for (auto& layer : p.layers) {
    add_coords(coords, layer.weight);
    add_coords(coords, layer.bias);
  }
}

inline void add_smp_values(std::vector<double>& out, const SmpParams<double>& p) {
  for (const auto& layer : p.layers) {
    add_values(out, layer.weight);
    add_values(out, layer.bias);
  }
}

inline SmpParams<double> random_smp(Index c, Index r, Index h, Pcg32& rng) {
  SmpParams<double> p = SmpParams<double>::Random(c, r, h, rng);
  for (auto& layer : p.layers) layer.bias = normal_matrix(layer.bias.size(), 1, rng, 0.3);
  return p;
}

inline FeatureMap<double> random_map(Index c, Index h, Index w, Pcg32& rng) {
  return FeatureMap<double>(h, w, normal_matrix(c, h * w, rng));
}

inline FdResult fd_id_loss(Pcg32& rng) {
  const Index m = 5, d = 6, n = 8;
  ClassifierHead<double> head{normal_matrix(m, d, rng), normal_matrix(m, 1, rng)};
  Batch<double> batch{normal_matrix(d, n, rng), {}};
  for (Index i = 0; i < n; ++i) batch.labels.push_back(static_cast<int>(rng.below(m)));
  const auto r = id_loss(head, batch);
  std::vector<double*> coords;
  std::vector<double> g;
  add_coords(coords, batch.features);
  add_values(g, r.d_features);
  add_coords(coords, head.weight);
  add_values(g, r.d_weight);
  add_coords(coords, head.bias);
  add_values(g, r.d_bias);
  return fd_check([&] { return id_loss(head, batch).loss; }, coords, to_vector(g));
}

inline FdResult fd_hard_triplet(Pcg32& rng) {
  Batch<double> batch{normal_matrix(5, 9, rng), block_labels(3, 3)};
  const double margin = 0.5;
  const auto r = hard_triplet_loss(batch, margin);
  std::vector<double*> coords;
  add_coords(coords, batch.features);
  std::vector<double> g;
  add_values(g, r.d_features);
  return fd_check([&] { return hard_triplet_loss(batch, margin).loss; }, coords, to_vector(g));
}

inline FdResult fd_softmax_triplet(Pcg32& rng) {
  Batch<double> batch{normal_matrix(5, 8, rng), block_labels(4, 2)};
  const auto r = softmax_triplet_loss(batch);
  std::vector<double*> coords;
  add_coords(coords, batch.features);
  std::vector<double> g;
  add_values(g, r.d_features);
  return fd_check([&] { return softmax_triplet_loss(batch).loss; }, coords, to_vector(g));
}

inline FdResult fd_smp(Pcg32& rng) {
  const Index c = 8;
  SmpParams<double> p = random_smp(c, 2, 5, rng);
  Eigen::VectorXd v = normal_matrix(c, 1, rng);
  const Eigen::VectorXd w = normal_matrix(c, 1, rng);
  SmpTrace<double> trace;
  smp_forward(p, v, &trace);
  SmpParams<double> grads = p.zeros_like();
  const Eigen::VectorXd dv = smp_backward(p, trace, w, &grads);
  std::vector<double*> coords;
  std::vector<double> g;
  add_smp_coords(coords, p);
  add_smp_values(g, grads);
  add_coords(coords, v);
  add_values(g, dv);
  return fd_check([&] { return w.dot(smp_forward(p, v)); }, coords, to_vector(g));
}

inline FdResult fd_ecab(Pcg32& rng) {
  const Index c = 8;
  SmpParams<double> p = random_smp(c, 4, 3, rng);
  FeatureMap<double> zeta = random_map(c, 2, 3, rng);
  const Eigen::VectorXd w = normal_matrix(c, 1, rng);
  MaskTrace<double> trace;
  ecab(p, zeta, &trace);
  SmpParams<double> grads = p.zeros_like();
  const FeatureMap<double> dz = ecab_backward(p, zeta, trace, w, &grads);
  std::vector<double*> coords;
  std::vector<double> g;
  add_smp_coords(coords, p);
  add_smp_values(g, grads);
  add_coords(coords, zeta.data());
  add_values(g, dz.data());
  return fd_check([&] { return w.dot(ecab(p, zeta)); }, coords, to_vector(g));
}

inline FdResult fd_secab(Pcg32& rng) {
  const Index c = 8;
  SmpParams<double> p = random_smp(c, 4, 5, rng);
  FeatureMap<double> tau = random_map(c, 4, 2, rng);
  const Eigen::VectorXd w = normal_matrix(c, 1, rng);
  MaskTrace<double> trace;
  secab(p, tau, &trace);
  SmpParams<double> grads = p.zeros_like();
  const FeatureMap<double> dt = secab_backward(p, tau, trace, w, &grads);
  std::vector<double*> coords;
  std::vector<double> g;
  add_smp_coords(coords, p);
  add_smp_values(g, grads);
  add_coords(coords, tau.data());
  add_values(g, dt.data());
  return fd_check([&] { return w.dot(secab(p, tau)); }, coords, to_vector(g));
}

inline FdResult fd_fusion(Pcg32& rng, bool use_secab) {
  const Index c = 8;
  auto random_bn = [&] {
    BatchNormParams<double> bn;
    bn.running_mean = normal_matrix(c, 1, rng, 0.2);
    bn.running_var = normal_matrix(c, 1, rng).cwiseAbs().array() + 0.5;
    bn.scale = normal_matrix(c, 1, rng);
    bn.shift = normal_matrix(c, 1, rng);
    return bn;
  };
  FusionParams<double> fp{random_smp(c, 4, 3, rng), random_smp(c, 4, 3, rng), random_smp(c, 4, 3, rng),
                          random_bn(), random_bn()};
  FeatureMap<double> top = random_map(c, 2, 2, rng);
  FeatureMap<double> bottom = random_map(c, 2, 2, rng);
  FeatureMap<double> tau = random_map(c, 4, 2, rng);
  const Eigen::VectorXd wt = normal_matrix(c, 1, rng);
  const Eigen::VectorXd wb = normal_matrix(c, 1, rng);
  const FusionOptions opt{use_secab};
  FusionTrace<double> trace;
  ensemble_fusion(fp, top, bottom, tau, opt, &trace);
  const auto grads = ensemble_fusion_backward(fp, top, bottom, tau, trace, wt, wb);
  std::vector<double*> coords;
  std::vector<double> g;
  add_smp_coords(coords, fp.ecab_top);
  add_smp_values(g, grads.params.ecab_top);
  add_smp_coords(coords, fp.ecab_bottom);
  add_smp_values(g, grads.params.ecab_bottom);
  if (use_secab) {
    add_smp_coords(coords, fp.secab_global);
    add_smp_values(g, grads.params.secab_global);
  }
  for (auto [bn, dbn] : {std::pair{&fp.bn_top, &grads.params.bn_top}, std::pair{&fp.bn_bottom, &grads.params.bn_bottom}}) {
    add_coords(coords, bn->scale);
    add_values(g, dbn->scale);
    add_coords(coords, bn->shift);
    add_values(g, dbn->shift);
  }
  add_coords(coords, top.data());
  add_values(g, grads.d_zeta_top.data());
  add_coords(coords, bottom.data());
  add_values(g, grads.d_zeta_bottom.data());
  add_coords(coords, tau.data());
  add_values(g, grads.d_tau_global.data());
  return fd_check(
      [&] {
        const auto out = ensemble_fusion(fp, top, bottom, tau, opt);
        return wt.dot(out.theta_top) + wb.dot(out.theta_bottom);
      },
      coords, to_vector(g));
}

inline BackboneConfig small_backbone(Index depth) {
  BackboneConfig cfg;
  cfg.input_dim = 6;
  cfg.channels = 4;
  cfg.height = 3;
  cfg.width = 2;
  cfg.depth = depth;
  cfg.hidden = 8;
  cfg.reduction = 2;
  cfg.smp_layers = 3;
  cfg.classes = 5;
  return cfg;
}

inline DeskBackbone random_backbone(Index depth, Pcg32& rng) {
  DeskBackbone model = DeskBackbone::initialize(small_backbone(depth), rng);
  for (const auto& [name, value] : model.params().entries()) {
    if (name.rfind("encoder.", 0) == 0 && name.ends_with(".bias")) {
      model.params().set(name, normal_matrix(value.rows(), value.cols(), rng, 0.3));
    }
  }
  return model;
}

inline std::vector<double*> encoder_coords(DeskBackbone& model, const ParameterStore& grads,
                                           std::vector<double>& g) {
  std::vector<double*> coords;
  std::vector<std::string> names;
  for (const auto& [name, value] : model.params().entries()) {
    if (name.rfind("encoder.", 0) == 0) names.push_back(name);
  }
  for (const auto& name : names) {
    Eigen::MatrixXd& m = model.params().mutable_entry(name);
    add_coords(coords, m);
    add_values(g, grads.at(name));
  }
  return coords;
}

/// Random projection of the pooled streams of a batch.
inline FdResult fd_backbone_pooled(Pcg32& rng) {
  DeskBackbone model = random_backbone(1 + static_cast<Index>(rng.below(2)), rng);
  const Index n = 5, c = model.config().channels;
  const Eigen::MatrixXd x = normal_matrix(model.config().input_dim, n, rng);
  const PooledBatch w{normal_matrix(c, n, rng), normal_matrix(c, n, rng), normal_matrix(c, n, rng)};
  auto objective = [&] {
    const PooledBatch p = model.pool(model.forward_batch(x));
    return (p.global.array() * w.global.array()).sum() + (p.top.array() * w.top.array()).sum() +
           (p.bottom.array() * w.bottom.array()).sum();
  };
  const ParameterStore grads = model.backward(model.forward_batch(x), w);
  std::vector<double> g;
  const auto coords = encoder_coords(model, grads, g);
  return fd_check(objective, coords, to_vector(g));
}

/// The full target objective through flips and BMFN, as a fine-tune step
/// computes it, with respect to the encoder and the classifier.
inline FdResult fd_backbone_objective(Pcg32& rng) {
  DeskBackbone model = random_backbone(1 + static_cast<Index>(rng.below(2)), rng);
  const LossConfig loss;
  const Eigen::MatrixXd x = normal_matrix(model.config().input_dim, 8, rng);
  const std::vector<int> y = block_labels(4, 2);
  auto objective = [&](ParameterStore* grads) {
    const Embedding emb = embed_batch(model, x);
    const Batch<double> global{emb.features.global, y};
    const Batch<double> top{emb.features.top, y};
    const Batch<double> bottom{emb.features.bottom, y};
    const auto id = id_loss(model.head(), global);
    const auto tri = hard_triplet_loss(global, loss.margin);
    const auto st = softmax_triplet_loss(top);
    const auto sb = softmax_triplet_loss(bottom);
    if (grads) {
      const PooledBatch d{loss.alpha * id.d_features + loss.beta * tri.d_features, loss.gamma * st.d_features,
                          loss.delta * sb.d_features};
      *grads = embed_backward(model, emb, d);
      grads->mutable_entry("head.weight") += loss.alpha * id.d_weight;
      grads->mutable_entry("head.bias") += loss.alpha * id.d_bias;
    }
    return target_total(id.loss, tri.loss, st.loss, sb.loss, loss);
  };
  ParameterStore grads;
  objective(&grads);
  std::vector<double> g;
  auto coords = encoder_coords(model, grads, g);
  for (const char* name : {"head.weight", "head.bias"}) {
    add_coords(coords, model.params().mutable_entry(name));
    add_values(g, grads.at(name));
  }
  return fd_check([&] { return objective(nullptr); }, coords, to_vector(g));
}

struct GradientSuite {
  std::string name;
  std::function<FdResult(Pcg32&)> fixture;
};

inline std::vector<GradientSuite> gradient_suites() {
  return {
      {"id_loss", fd_id_loss},
      {"hard_triplet_loss", fd_hard_triplet},
      {"softmax_triplet_loss", fd_softmax_triplet},
      {"smp_forward", fd_smp},
      {"ecab", fd_ecab},
      {"secab", fd_secab},
      {"ensemble_fusion", [](Pcg32& rng) { return fd_fusion(rng, true); }},
      {"ensemble_fusion_no_secab", [](Pcg32& rng) { return fd_fusion(rng, false); }},
      {"backbone_pooled", fd_backbone_pooled},
      {"backbone_objective", fd_backbone_objective},
  };
}

struct SuiteOutcome {
  int accepted = 0;
  int rejected = 0;
  double worst = 0;
};

/// Draws fixtures until `count` are accepted (or 10 * count attempts).
inline SuiteOutcome run_gradient_suite(const GradientSuite& suite, int count, std::uint64_t seed) {
  Pcg32 rng(seed);
  SuiteOutcome out;
  for (int attempt = 0; attempt < 10 * count && out.accepted < count; ++attempt) {
    const FdResult r = suite.fixture(rng);
    if (!r.smooth || r.analytic_norm == 0.0) {
      ++out.rejected;
      continue;
    }
    ++out.accepted;
    out.worst = std::max(out.worst, r.rel_error);
  }
  return out;
}

}  // namespace reid::testing
