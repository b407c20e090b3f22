#include "reid/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "reid/parallel.hpp"

namespace reid {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& x, const std::vector<Index>& idx) {
  Eigen::MatrixXd out(x.rows(), static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Index>(i)) = x.col(idx[i]);
  return out;
}

std::vector<int> gather_labels(const std::vector<int>& labels, const std::vector<Index>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (Index i : idx) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

PooledBatch zeros_like(const PooledBatch& p) {
  return {Eigen::MatrixXd::Zero(p.global.rows(), p.global.cols()),
          Eigen::MatrixXd::Zero(p.top.rows(), p.top.cols()),
          Eigen::MatrixXd::Zero(p.bottom.rows(), p.bottom.cols())};
}

// A sample whose pooled stream is zero in both views (every ReLU unit of
// that region inactive) gets a zero feature and no gradient.
bool dead_pair(const Eigen::MatrixXd& pooled, Index i, Index n) {
  return (pooled.col(i) + pooled.col(n + i)).squaredNorm() == 0.0;
}

Eigen::MatrixXd bmfn_columns(const Eigen::MatrixXd& pooled) {
  const Index n = pooled.cols() / 2;
  Eigen::MatrixXd out(pooled.rows(), n);
  for (Index i = 0; i < n; ++i) {
    if (dead_pair(pooled, i, n)) {
      out.col(i).setZero();
    } else {
      out.col(i) = bmfn<double>(pooled.col(i), pooled.col(n + i));
    }
  }
  return out;
}

Eigen::MatrixXd bmfn_backward_columns(const Eigen::MatrixXd& pooled, const Eigen::MatrixXd& d_out) {
  const Index n = pooled.cols() / 2;
  Eigen::MatrixXd d(pooled.rows(), 2 * n);
  for (Index i = 0; i < n; ++i) {
    if (dead_pair(pooled, i, n)) {
      d.col(i).setZero();
      d.col(n + i).setZero();
      continue;
    }
    const Eigen::VectorXd g = bmfn_backward<double>(pooled.col(i), pooled.col(n + i), d_out.col(i));
    d.col(i) = g;
    d.col(n + i) = g;
  }
  return d;
}

Eigen::MatrixXd with_flips(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd both(x.rows(), 2 * x.cols());
  both << x, flip_inputs(x);
  return both;
}

void add_head_grads(ParameterStore& grads, const IdLossResult<double>& id, double weight) {
  grads.mutable_entry("head.weight") += weight * id.d_weight;
  grads.mutable_entry("head.bias") += weight * id.d_bias;
}

void require_labelled(std::span<const SampleRecord> records, const char* what) {
  for (const auto& r : records) {
    if (!r.identity) throw DataError(std::string(what) + " record " + std::to_string(r.id) + " has no identity");
  }
}

std::vector<int> class_labels(std::span<const SampleRecord> records, std::vector<std::int32_t>* classes) {
  std::set<std::int32_t> ids;
  for (const auto& r : records) ids.insert(*r.identity);
  classes->assign(ids.begin(), ids.end());
  std::map<std::int32_t, int> index;
  for (std::size_t i = 0; i < classes->size(); ++i) index[(*classes)[i]] = static_cast<int>(i);
  std::vector<int> labels;
  labels.reserve(records.size());
  for (const auto& r : records) labels.push_back(index.at(*r.identity));
  return labels;
}

BackboneConfig shaped_backbone(const PipelineConfig& cfg, const FeatureShape& shape, Index classes) {
  if (shape.rank() != 1) throw ShapeError("the desk backbone takes rank-1 feature vectors");
  BackboneConfig b = cfg.backbone;
  b.input_dim = static_cast<Index>(shape.size());
  b.classes = classes;
  return b;
}

void require_min_clusters(const PseudoLabels& labels) {
  std::map<int, int> counts;
  for (int y : labels.labels) ++counts[y];
  int usable = 0;
  for (auto [y, c] : counts) usable += c >= 2 ? 1 : 0;
  if (usable < 2) {
    throw ClusteringError(std::string("pseudo-label stream '") + stream_name(labels.stream) +
                          "' has fewer than two clusters with two or more members");
  }
}

void update_running_stats(BatchNormParams<double>& bn, const Eigen::MatrixXd& pooled, double momentum) {
  const Index n = pooled.cols();
  const Eigen::VectorXd mean = pooled.rowwise().mean();
  const Eigen::MatrixXd centred = pooled.colwise() - mean;
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  const Eigen::VectorXd var = centred.rowwise().squaredNorm() / denom;
  bn.running_mean = (1.0 - momentum) * bn.running_mean + momentum * mean;
  bn.running_var = (1.0 - momentum) * bn.running_var + momentum * var;
}

Eigen::MatrixXd head_scale_rows(const Eigen::MatrixXd& w, double scale) {
  Eigen::MatrixXd out = w;
  for (Index j = 0; j < w.rows(); ++j) {
    const double n = w.row(j).norm();
    if (n > 0.0) out.row(j) *= scale / n;
  }
  return out;
}

ClassifierHead<double> centroid_head(const Eigen::MatrixXd& centroids, double scale) {
  ClassifierHead<double> head{Eigen::MatrixXd(centroids.cols(), centroids.rows()),
                              Eigen::VectorXd::Zero(centroids.cols())};
  for (Index j = 0; j < centroids.cols(); ++j) {
    const double n = centroids.col(j).norm();
    if (n > 0.0) {
      head.weight.row(j) = (scale / n * centroids.col(j)).transpose();
    } else {
      head.weight.row(j).setZero();
    }
  }
  return head;
}

void set_head_everywhere(DeskBackbone& student, DeskBackbone& teacher, OptimizerState& opt,
                         const ClassifierHead<double>& head) {
  student.set_head(head);
  teacher.set_head(head);
  opt.reset_entry("head.weight", head.weight.rows(), head.weight.cols());
  opt.reset_entry("head.bias", head.bias.size(), 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  for (Index v : {k_global, k_top, k_bottom, batch_identities, batch_instances}) {
    if (v < 1) throw ConfigError("cluster counts and batch structure must be >= 1");
  }
  if (batch_identities < 2) throw ConfigError("triplet batches need P >= 2 identities");
  if (batch_instances < 2) throw ConfigError("triplet batches need K >= 2 instances");
  if (pretrain_epochs < 0 || pretrain_iterations < 0 || epochs < 0 || iterations_per_epoch < 0) {
    throw ConfigError("epoch and iteration counts must be >= 0");
  }
  if (!(pretrain_lr > 0.0 && finetune_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (!(head_scale > 0.0)) throw ConfigError("head_scale must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw ConfigError("bn_momentum must lie in [0,1]");
  loss.validate();
  ema.validate();
  ClusterConfig probe = clustering;
  probe.k = k_global;
  probe.validate();
  BackboneConfig b = backbone;
  b.classes = std::max<Index>(b.classes, 1);
  b.validate();
}

PipelineConfig PipelineConfig::from_config(ConfigFile& f) {
  PipelineConfig c;
  c.source = f.get_string("source", "");
  c.target = f.get_string("target", "");
  c.checkpoint_dir = f.get_string("checkpoint_dir", c.checkpoint_dir.string());
  c.backbone.channels = f.get_int("channels", c.backbone.channels);
  c.backbone.height = f.get_int("height", c.backbone.height);
  c.backbone.width = f.get_int("width", c.backbone.width);
  c.backbone.depth = f.get_int("depth", c.backbone.depth);
  c.backbone.hidden = f.get_int("hidden", c.backbone.hidden);
  c.backbone.reduction = f.get_int("reduction", c.backbone.reduction);
  c.backbone.smp_layers = f.get_int("smp_layers", c.backbone.smp_layers);
  c.k_global = f.get_int("k_global", c.k_global);
  c.k_top = f.get_int("k_top", c.k_top);
  c.k_bottom = f.get_int("k_bottom", c.k_bottom);
  c.clustering.candidates = f.get_int("cluster_candidates", c.clustering.candidates);
  c.clustering.max_iter = f.get_int("cluster_max_iter", c.clustering.max_iter);
  c.clustering.batch_size = f.get_int("cluster_batch_size", c.clustering.batch_size);
  c.clustering.early_stop_batches = f.get_int("cluster_early_stop", c.clustering.early_stop_batches);
  c.clustering.reassign_ratio = f.get_double("cluster_reassign_ratio", c.clustering.reassign_ratio);
  const std::string seeding = f.get_string("seeding", "greedy");
  if (seeding == "greedy") {
    c.clustering.seeding = Seeding::kGreedy;
  } else if (seeding == "random") {
    c.clustering.seeding = Seeding::kRandom;
  } else {
    throw ConfigError("seeding must be 'greedy' or 'random'");
  }
  c.use_secab = f.get_bool("use_secab", c.use_secab);
  c.loss.kappa = f.get_double("kappa", c.loss.kappa);
  c.loss.margin = f.get_double("margin", c.loss.margin);
  c.loss.alpha = f.get_double("alpha", c.loss.alpha);
  c.loss.beta = f.get_double("beta", c.loss.beta);
  c.loss.gamma = f.get_double("gamma", c.loss.gamma);
  c.loss.delta = f.get_double("delta", c.loss.delta);
  c.ema.eta = f.get_double("eta", c.ema.eta);
  c.pretrain_epochs = f.get_int("pretrain_epochs", c.pretrain_epochs);
  c.pretrain_iterations = f.get_int("pretrain_iterations", c.pretrain_iterations);
  c.epochs = f.get_int("epochs", c.epochs);
  c.iterations_per_epoch = f.get_int("iterations_per_epoch", c.iterations_per_epoch);
  c.batch_identities = f.get_int("batch_identities", c.batch_identities);
  c.batch_instances = f.get_int("batch_instances", c.batch_instances);
  const auto batch = f.get_int("batch_size", c.batch_size());
  if (batch != c.batch_size()) throw ConfigError("batch_size must equal batch_identities * batch_instances");
  c.pretrain_lr = f.get_double("pretrain_lr", c.pretrain_lr);
  c.finetune_lr = f.get_double("finetune_lr", c.finetune_lr);
  c.weight_decay = f.get_double("weight_decay", c.weight_decay);
  c.head_scale = f.get_double("head_scale", c.head_scale);
  c.bn_momentum = f.get_double("bn_momentum", c.bn_momentum);
  c.evaluate_each_epoch = f.get_bool("evaluate_each_epoch", c.evaluate_each_epoch);
  c.seed = f.get_uint("seed", c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Run log

void RunLog::append(EpochRecord record) { epochs_.push_back(std::move(record)); }

nlohmann::json RunLog::to_json(bool include_wall_time) const {
  nlohmann::json out;
  out["stage"] = stage_;
  auto& rows = out["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs_) {
    nlohmann::json row{{"epoch", e.epoch},   {"loss", e.loss},
                       {"id", e.id},         {"triplet", e.triplet},
                       {"triplet_top", e.triplet_top}, {"triplet_bottom", e.triplet_bottom}};
    if (e.inertia) row["inertia"] = {(*e.inertia)[0], (*e.inertia)[1], (*e.inertia)[2]};
    if (e.eval_map) row["eval_map"] = *e.eval_map;
    if (e.eval_rank1) row["eval_rank1"] = *e.eval_rank1;
    if (include_wall_time) row["wall_seconds"] = e.wall_seconds;
    rows.push_back(std::move(row));
  }
  return out;
}

std::string RunLog::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "stage,epoch,loss,id,triplet,triplet_top,triplet_bottom,inertia_global,inertia_top,"
         "inertia_bottom,eval_map,eval_rank1,wall_seconds\n";
  for (const auto& e : epochs_) {
    out << stage_ << ',' << e.epoch << ',' << e.loss << ',' << e.id << ',' << e.triplet << ','
        << e.triplet_top << ',' << e.triplet_bottom;
    for (int s = 0; s < 3; ++s) {
      out << ',';
      if (e.inertia) out << (*e.inertia)[static_cast<std::size_t>(s)];
    }
    out << ',';
    if (e.eval_map) out << *e.eval_map;
    out << ',';
    if (e.eval_rank1) out << *e.eval_rank1;
    out << ',' << e.wall_seconds << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Batches and embeddings

std::vector<Index> sample_pk(const std::vector<int>& labels, Index p, Index k, Pcg32& rng) {
  std::map<int, std::vector<Index>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(static_cast<Index>(i));
  std::vector<const std::vector<Index>*> eligible;
  for (const auto& [label, members] : groups) {
    if (members.size() >= 2) eligible.push_back(&members);
  }
  if (eligible.size() < 2) throw BatchStructureError("fewer than two labels have two or more samples");
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(p), eligible.size());
  for (std::size_t i = 0; i < take; ++i) {
    const auto j = i + rng.below(static_cast<std::uint32_t>(eligible.size() - i));
    std::swap(eligible[i], eligible[j]);
  }
  std::vector<Index> out;
  out.reserve(take * static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < take; ++i) {
    std::vector<Index> members = *eligible[i];
    const auto kk = static_cast<std::size_t>(k);
    if (members.size() >= kk) {
      for (std::size_t a = 0; a < kk; ++a) {
        const auto b = a + rng.below(static_cast<std::uint32_t>(members.size() - a));
        std::swap(members[a], members[b]);
        out.push_back(members[a]);
      }
    } else {
      out.insert(out.end(), members.begin(), members.end());
      for (std::size_t a = members.size(); a < kk; ++a) {
        out.push_back(members[rng.below(static_cast<std::uint32_t>(members.size()))]);
      }
    }
  }
  return out;
}

Embedding embed_batch(const DeskBackbone& model, const Eigen::MatrixXd& inputs) {
  Embedding emb;
  emb.acts = model.forward_batch(with_flips(inputs));
  emb.pooled = model.pool(emb.acts);
  emb.features.global = bmfn_columns(emb.pooled.global);
  emb.features.top = bmfn_columns(emb.pooled.top);
  emb.features.bottom = bmfn_columns(emb.pooled.bottom);
  return emb;
}

ParameterStore embed_backward(const DeskBackbone& model, const Embedding& emb, const PooledBatch& d_features) {
  PooledBatch d_pooled{bmfn_backward_columns(emb.pooled.global, d_features.global),
                       bmfn_backward_columns(emb.pooled.top, d_features.top),
                       bmfn_backward_columns(emb.pooled.bottom, d_features.bottom)};
  return model.backward(emb.acts, d_pooled);
}

LabeledFeatures inference_features(const DeskBackbone& model, std::span<const SampleRecord> records) {
  LabeledFeatures out = labeled_features(records);
  const Index n = out.size();
  const Activations acts = model.forward_batch(with_flips(feature_matrix(records)));
  const Index c = model.config().channels;
  Eigen::MatrixXd desc(3 * c, n);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    const auto col = static_cast<Index>(i);
    const FeatureMap<double> map = model.map_at(acts, col);
    const FeatureMap<double> flipped = model.map_at(acts, n + col);
    if (map.flat().squaredNorm() > 0.0 && flipped.flat().squaredNorm() > 0.0) {
      desc.col(col) = inference_feature(map, flipped);
      return;
    }
    // A view whose map is entirely inactive contributes nothing.
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(3 * c);
    for (const auto* m : {&map, &flipped}) {
      const auto pooled = pool_streams(*m);
      Eigen::VectorXd cat(3 * c);
      cat << pooled.top, pooled.bottom, pooled.global;
      const double norm = cat.norm();
      if (norm > 0.0) sum += cat / norm;
    }
    const double norm = sum.norm();
    desc.col(col) = norm > 0.0 ? Eigen::VectorXd(sum / norm) : sum;
  });
  out.features = std::move(desc);
  return out;
}

FusedFeatures fused_features(const DeskBackbone& student, const DeskBackbone& teacher,
                             const Eigen::MatrixXd& inputs, FusionOptions options) {
  const Index n = inputs.cols();
  const Eigen::MatrixXd both = with_flips(inputs);
  const Activations s_acts = student.forward_batch(both);
  const Activations t_acts = teacher.forward_batch(both);
  const FusionParams<double> fp = teacher.fusion();
  const Index c = fp.channels();
  Eigen::MatrixXd theta_top(c, 2 * n), theta_bottom(c, 2 * n);
  FusedFeatures out{{}, {}, Eigen::MatrixXd(c, 2 * n), Eigen::MatrixXd(c, 2 * n)};
  parallel_for(static_cast<std::size_t>(2 * n), [&](std::size_t i) {
    const auto col = static_cast<Index>(i);
    const auto [zeta_top, zeta_bottom] = split_map(student.map_at(s_acts, col));
    FusionTrace<double> trace;
    const auto fused = ensemble_fusion(fp, zeta_top, zeta_bottom, teacher.map_at(t_acts, col), options, &trace);
    theta_top.col(col) = fused.theta_top;
    theta_bottom.col(col) = fused.theta_bottom;
    out.pooled_top.col(col) = trace.pooled_top;
    out.pooled_bottom.col(col) = trace.pooled_bottom;
  });
  out.phi_top = bmfn_columns(theta_top);
  out.phi_bottom = bmfn_columns(theta_bottom);
  return out;
}

// ---------------------------------------------------------------------------
// Training stages

PretrainResult pretrain_source(const PipelineConfig& cfg, const DatasetSplit& source) {
  cfg.validate();
  require_labelled(source.train, "source train");
  if (source.train.empty()) throw DataError("source split has no training records");
  std::vector<std::int32_t> classes;
  const std::vector<int> labels = class_labels(source.train, &classes);
  const Eigen::MatrixXd x = feature_matrix(source.train);

  Pcg32 root(cfg.seed);
  Pcg32 init_rng = root.split();
  Pcg32 batch_rng = root.split();
  DeskBackbone model =
      DeskBackbone::initialize(shaped_backbone(cfg, source.shape, static_cast<Index>(classes.size())), init_rng);
  {
    ClassifierHead<double> head = model.head();
    head.weight = head_scale_rows(head.weight, cfg.head_scale);
    model.set_head(head);
  }
  OptimizerState opt = OptimizerState::for_params(model.params(), cfg.pretrain_lr, cfg.weight_decay);

  RunLog log("pretrain");
  for (Index epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    const auto start = Clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    for (Index it = 0; it < cfg.pretrain_iterations; ++it) {
      const auto idx = sample_pk(labels, cfg.batch_identities, cfg.batch_instances, batch_rng);
      const auto batch_labels = gather_labels(labels, idx);
      const Embedding emb = embed_batch(model, gather(x, idx));
      const Batch<double> batch{emb.features.global, batch_labels};
      const auto id = id_loss(model.head(), batch);
      const auto tri = hard_triplet_loss(batch, cfg.loss.margin);
      PooledBatch d = zeros_like(emb.features);
      d.global = id.d_features + cfg.loss.kappa * tri.d_features;
      ParameterStore grads = embed_backward(model, emb, d);
      add_head_grads(grads, id, 1.0);
      adam_step(model.params(), grads, opt);
      rec.id += id.loss;
      rec.triplet += tri.loss;
      rec.loss += source_total(id.loss, tri.loss, cfg.loss.kappa);
    }
    if (cfg.pretrain_iterations > 0) {
      const double inv = 1.0 / static_cast<double>(cfg.pretrain_iterations);
      rec.id *= inv;
      rec.triplet *= inv;
      rec.loss *= inv;
    }
    if (cfg.evaluate_each_epoch && !source.query.empty() && !source.gallery.empty()) {
      const EvalReport r = direct_transfer_eval(model, source);
      rec.eval_map = r.map_standard;
      rec.eval_rank1 = r.rank_at.at(1);
    }
    rec.wall_seconds = seconds_since(start);
    log.append(std::move(rec));
  }

  Checkpoint ckpt = checkpoint_from_model(model);
  ckpt.metadata["stage"] = "pretrain";
  ckpt.metadata["seed"] = cfg.seed;
  ckpt.metadata["classes"] = classes;
  return {std::move(model), std::move(ckpt), std::move(log)};
}

FinetuneResult finetune_target(const PipelineConfig& cfg, const Checkpoint& pretrained,
                               const DatasetSplit& target) {
  cfg.validate();
  if (target.train.empty()) throw DataError("target split has no training records");
  DeskBackbone base = model_from_checkpoint(pretrained);
  if (target.shape.rank() != 1 || static_cast<Index>(target.shape.size()) != base.config().input_dim) {
    throw CongruenceError("checkpoint input size does not match the target feature shape");
  }
  const Eigen::MatrixXd x = feature_matrix(target.train);
  const Index n = x.cols();

  auto [student_params, teacher_params] = init_copy(base.params());
  DeskBackbone student(base.config(), std::move(student_params));
  DeskBackbone teacher(base.config(), std::move(teacher_params));
  OptimizerState opt = OptimizerState::for_params(student.params(), cfg.finetune_lr, cfg.weight_decay);

  Pcg32 root(cfg.seed);
  Pcg32 cluster_rng = root.split();
  Pcg32 batch_rng = root.split();
  const FusionOptions fusion_options{cfg.use_secab};
  const std::array<Index, 3> ks{cfg.k_global, cfg.k_top, cfg.k_bottom};
  const std::array<LabelStream, 3> streams{LabelStream::kGlobal, LabelStream::kTop, LabelStream::kBottom};

  FinetuneResult result{student, teacher, {}, RunLog("finetune"), {}, {}};
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    EpochRecord rec;
    rec.epoch = epoch;

    // Features for clustering: teacher global, fused top/bottom.
    const Embedding teacher_emb = embed_batch(teacher, x);
    const FusedFeatures fused = fused_features(student, teacher, x, fusion_options);
    {
      FusionParams<double> fp = student.fusion();
      update_running_stats(fp.bn_top, fused.pooled_top, cfg.bn_momentum);
      update_running_stats(fp.bn_bottom, fused.pooled_bottom, cfg.bn_momentum);
      student.set_fusion(fp);
    }
    const std::array<const Eigen::MatrixXd*, 3> points{&teacher_emb.features.global, &fused.phi_top,
                                                       &fused.phi_bottom};
    std::array<double, 3> inertia{};
    Eigen::MatrixXd global_centroids;
    for (std::size_t s = 0; s < 3; ++s) {
      ClusterConfig cc = cfg.clustering;
      cc.k = std::min(ks[s], n);
      cc.seed = cluster_rng.next_u64();
      const auto model = fit_kmeans(*points[s], cc);
      result.labels[s] = assign_labels(*points[s], model, streams[s]);
      require_min_clusters(result.labels[s]);
      inertia[s] = model.inertia;
      if (s == 0) global_centroids = model.centroids;
    }
    rec.inertia = inertia;
    set_head_everywhere(student, teacher, opt, centroid_head(global_centroids, cfg.head_scale));

    for (Index it = 0; it < cfg.iterations_per_epoch; ++it) {
      std::array<std::vector<Index>, 3> idx;
      for (std::size_t s = 0; s < 3; ++s) {
        idx[s] = sample_pk(result.labels[s].labels, cfg.batch_identities, cfg.batch_instances, batch_rng);
      }
      std::vector<Index> all;
      for (const auto& v : idx) all.insert(all.end(), v.begin(), v.end());
      const Embedding emb = embed_batch(student, gather(x, all));
      const Index b0 = static_cast<Index>(idx[0].size());
      const Index b1 = static_cast<Index>(idx[1].size());
      const Index b2 = static_cast<Index>(idx[2].size());

      const Batch<double> global{emb.features.global.leftCols(b0), gather_labels(result.labels[0].labels, idx[0])};
      const Batch<double> top{emb.features.top.middleCols(b0, b1), gather_labels(result.labels[1].labels, idx[1])};
      const Batch<double> bottom{emb.features.bottom.rightCols(b2), gather_labels(result.labels[2].labels, idx[2])};
      const auto id = id_loss(student.head(), global);
      const auto tri = hard_triplet_loss(global, cfg.loss.margin);
      const auto tri_top = softmax_triplet_loss(top);
      const auto tri_bottom = softmax_triplet_loss(bottom);

      PooledBatch d = zeros_like(emb.features);
      d.global.leftCols(b0) = cfg.loss.alpha * id.d_features + cfg.loss.beta * tri.d_features;
      d.top.middleCols(b0, b1) = cfg.loss.gamma * tri_top.d_features;
      d.bottom.rightCols(b2) = cfg.loss.delta * tri_bottom.d_features;
      ParameterStore grads = embed_backward(student, emb, d);
      add_head_grads(grads, id, cfg.loss.alpha);
      adam_step(student.params(), grads, opt);
      ema_update(teacher.params(), student.params(), cfg.ema.eta);

      rec.id += id.loss;
      rec.triplet += tri.loss;
      rec.triplet_top += tri_top.loss;
      rec.triplet_bottom += tri_bottom.loss;
      rec.loss += target_total(id.loss, tri.loss, tri_top.loss, tri_bottom.loss, cfg.loss);
    }
    if (cfg.iterations_per_epoch > 0) {
      const double inv = 1.0 / static_cast<double>(cfg.iterations_per_epoch);
      rec.id *= inv;
      rec.triplet *= inv;
      rec.triplet_top *= inv;
      rec.triplet_bottom *= inv;
      rec.loss *= inv;
    }
    if (cfg.evaluate_each_epoch && !target.query.empty() && !target.gallery.empty()) {
      const EvalReport r = direct_transfer_eval(teacher, target);
      rec.eval_map = r.map_standard;
      rec.eval_rank1 = r.rank_at.at(1);
    }
    rec.wall_seconds = seconds_since(start);
    result.final_inertia = inertia;
    result.log.append(std::move(rec));
  }

  Checkpoint ckpt;
  insert_prefixed(ckpt.params, student.params(), "student.");
  insert_prefixed(ckpt.params, teacher.params(), "teacher.");
  ckpt.metadata["backbone"] = backbone_to_json(teacher.config());
  ckpt.metadata["stage"] = "finetune";
  ckpt.metadata["seed"] = cfg.seed;
  ckpt.metadata["k"] = {cfg.k_global, cfg.k_top, cfg.k_bottom};
  ckpt.metadata["use_secab"] = cfg.use_secab;
  ckpt.metadata["seeding"] = cfg.clustering.seeding == Seeding::kGreedy ? "greedy" : "random";
  result.student = std::move(student);
  result.teacher = std::move(teacher);
  result.checkpoint = std::move(ckpt);
  return result;
}

EvalReport direct_transfer_eval(const DeskBackbone& model, const DatasetSplit& split) {
  require_labelled(split.query, "query");
  require_labelled(split.gallery, "gallery");
  const LabeledFeatures query = inference_features(model, split.query);
  const LabeledFeatures gallery = inference_features(model, split.gallery);
  return evaluate(query, gallery, true);
}

EvalReport direct_transfer_eval(const Checkpoint& pretrained, const DatasetSplit& split) {
  const std::string prefix = pretrained.params.contains("teacher.head.weight") ? "teacher." : "";
  return direct_transfer_eval(model_from_checkpoint(pretrained, prefix), split);
}

nlohmann::json eval_to_json(const EvalReport& report) {
  return {{"map_standard", report.map_standard}, {"map_paper", report.map_paper},
          {"rank1", report.rank_at.at(1)},       {"rank5", report.rank_at.at(5)},
          {"rank10", report.rank_at.at(10)},     {"cmc", report.cmc}};
}

std::string eval_per_query_csv(const EvalReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "query_id,average_precision,first_hit\n";
  for (std::size_t i = 0; i < report.query_ids.size(); ++i) {
    out << report.query_ids[i] << ',' << report.ap_standard[i] << ',' << report.first_hits[i] << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

namespace {

struct BenchData {
  DatasetSplit source;
  DatasetSplit target;
};

BenchData bench_data(const BenchConfig& config, std::uint64_t seed) {
  SynthConfig data = config.data;
  data.seed = seed;
  auto [source, target] = synth_generate(data);
  return {std::move(source), std::move(target)};
}

BenchCell run_cell(const std::string& name, const PipelineConfig& cfg, const Checkpoint& pretrained,
                   const DatasetSplit& target, RunLog* log = nullptr) {
  const FinetuneResult ft = finetune_target(cfg, pretrained, target);
  const EvalReport r = direct_transfer_eval(ft.teacher, target);
  if (log) *log = ft.log;
  BenchCell cell;
  cell.name = name;
  cell.seeding = cfg.clustering.seeding == Seeding::kGreedy ? "greedy" : "random";
  cell.use_secab = cfg.use_secab;
  cell.k_global = cfg.k_global;
  cell.k_top = cfg.k_top;
  cell.k_bottom = cfg.k_bottom;
  cell.map_standard = r.map_standard;
  cell.map_paper = r.map_paper;
  cell.rank1 = r.rank_at.at(1);
  cell.rank5 = r.rank_at.at(5);
  cell.rank10 = r.rank_at.at(10);
  cell.mean_final_inertia = (ft.final_inertia[0] + ft.final_inertia[1] + ft.final_inertia[2]) / 3.0;
  return cell;
}

BenchCell eval_cell(const std::string& name, const EvalReport& r) {
  BenchCell cell;
  cell.name = name;
  cell.seeding = "none";
  cell.use_secab = false;
  cell.map_standard = r.map_standard;
  cell.map_paper = r.map_paper;
  cell.rank1 = r.rank_at.at(1);
  cell.rank5 = r.rank_at.at(5);
  cell.rank10 = r.rank_at.at(10);
  return cell;
}

PipelineConfig with_seed(PipelineConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  return cfg;
}

}  // namespace

const BenchCell& BenchReport::cell(const std::string& name) const {
  for (const auto& c : cells) {
    if (c.name == name) return c;
  }
  throw StateError("no benchmark cell named '" + name + "'");
}

BenchReport synth_bench(std::uint64_t seed, const BenchConfig& config) {
  const BenchData data = bench_data(config, seed);
  const PipelineConfig base = with_seed(config.pipeline, seed);
  BenchReport report;
  report.seed = seed;
  const PretrainResult pre = pretrain_source(base, data.source);
  report.pretrain_log = pre.log;
  report.source_map = direct_transfer_eval(pre.model, data.source).map_standard;
  report.cells.push_back(eval_cell("direct_transfer", direct_transfer_eval(pre.model, data.target)));
  report.cells.push_back(run_cell("full", base, pre.checkpoint, data.target, &report.finetune_log));
  if (config.ablations) {
    PipelineConfig random = base;
    random.clustering.seeding = Seeding::kRandom;
    report.cells.push_back(run_cell("random_seeding", random, pre.checkpoint, data.target));
    PipelineConfig no_secab = base;
    no_secab.use_secab = false;
    report.cells.push_back(run_cell("no_secab", no_secab, pre.checkpoint, data.target));
    for (Index k : config.k_sweep) {
      PipelineConfig sweep = base;
      sweep.k_global = k;
      report.cells.push_back(run_cell("k_global_" + std::to_string(k), sweep, pre.checkpoint, data.target));
    }
  }
  return report;
}

nlohmann::json bench_to_json(const BenchReport& report) {
  nlohmann::json out;
  out["seed"] = report.seed;
  out["source_map"] = report.source_map;
  auto& cells = out["cells"] = nlohmann::json::array();
  for (const auto& c : report.cells) {
    cells.push_back({{"name", c.name},
                     {"seeding", c.seeding},
                     {"use_secab", c.use_secab},
                     {"k_global", c.k_global},
                     {"k_top", c.k_top},
                     {"k_bottom", c.k_bottom},
                     {"map_standard", c.map_standard},
                     {"map_paper", c.map_paper},
                     {"rank1", c.rank1},
                     {"rank5", c.rank5},
                     {"rank10", c.rank10},
                     {"mean_final_inertia", c.mean_final_inertia}});
  }
  out["pretrain_log"] = report.pretrain_log.to_json();
  out["finetune_log"] = report.finetune_log.to_json();
  return out;
}

std::string bench_to_csv(const BenchReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "cell,seeding,use_secab,k_global,k_top,k_bottom,map_standard,map_paper,rank1,rank5,rank10,"
         "mean_final_inertia\n";
  for (const auto& c : report.cells) {
    out << c.name << ',' << c.seeding << ',' << (c.use_secab ? 1 : 0) << ',' << c.k_global << ','
        << c.k_top << ',' << c.k_bottom << ',' << c.map_standard << ',' << c.map_paper << ',' << c.rank1
        << ',' << c.rank5 << ',' << c.rank10 << ',' << c.mean_final_inertia << '\n';
  }
  return out.str();
}

AblationReport ablation_study(const BenchConfig& config, std::uint64_t first_seed, Index count) {
  AblationReport rep;
  Index greedy_wins = 0;
  Index secab_wins = 0;
  for (Index i = 0; i < count; ++i) {
    const std::uint64_t seed = first_seed + static_cast<std::uint64_t>(i);
    const BenchData data = bench_data(config, seed);
    const PipelineConfig base = with_seed(config.pipeline, seed);
    const PretrainResult pre = pretrain_source(base, data.source);
    PipelineConfig random = base;
    random.clustering.seeding = Seeding::kRandom;
    PipelineConfig no_secab = base;
    no_secab.use_secab = false;
    const BenchCell full = run_cell("full", base, pre.checkpoint, data.target);
    const BenchCell rnd = run_cell("random_seeding", random, pre.checkpoint, data.target);
    const BenchCell off = run_cell("no_secab", no_secab, pre.checkpoint, data.target);
    rep.seeds.push_back(seed);
    rep.map_greedy.push_back(full.map_standard);
    rep.map_random.push_back(rnd.map_standard);
    rep.map_secab_on.push_back(full.map_standard);
    rep.map_secab_off.push_back(off.map_standard);
    rep.inertia_greedy.push_back(full.mean_final_inertia);
    rep.inertia_random.push_back(rnd.mean_final_inertia);
    greedy_wins += full.map_standard >= rnd.map_standard ? 1 : 0;
    secab_wins += full.map_standard >= off.map_standard ? 1 : 0;
  }
  if (count > 0) {
    rep.greedy_win_rate = static_cast<double>(greedy_wins) / static_cast<double>(count);
    rep.secab_win_rate = static_cast<double>(secab_wins) / static_cast<double>(count);
  }
  rep.greedy_pass = rep.greedy_win_rate >= rep.threshold;
  rep.secab_pass = rep.secab_win_rate >= rep.threshold;
  return rep;
}

nlohmann::json ablation_to_json(const AblationReport& r) {
  return {{"seeds", r.seeds},
          {"map_greedy", r.map_greedy},
          {"map_random", r.map_random},
          {"map_secab_on", r.map_secab_on},
          {"map_secab_off", r.map_secab_off},
          {"inertia_greedy", r.inertia_greedy},
          {"inertia_random", r.inertia_random},
          {"greedy_win_rate", r.greedy_win_rate},
          {"secab_win_rate", r.secab_win_rate},
          {"threshold", r.threshold},
          {"greedy_pass", r.greedy_pass},
          {"secab_pass", r.secab_pass}};
}

}  // namespace reid
