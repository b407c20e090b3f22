#include "reid/deskmodel.hpp"

#include <cmath>

namespace reid {

namespace {

const char* kSmpBlocks[] = {"fusion.ecab_top", "fusion.ecab_bottom", "fusion.secab"};
const char* kBnBlocks[] = {"fusion.bn_top", "fusion.bn_bottom"};
const char* kBnFields[] = {"running_mean", "running_var", "scale", "shift"};

std::string encoder_name(Index layer, const char* field) {
  return "encoder." + std::to_string(layer) + "." + field;
}

std::string smp_name(const char* block, std::size_t layer, const char* field) {
  return std::string(block) + ".layer" + std::to_string(layer) + "." + field;
}

Eigen::MatrixXd glorot(Index rows, Index cols, Pcg32& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Eigen::MatrixXd w(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) w(i, j) = rng.uniform(-bound, bound);
  }
  return w;
}

SmpParams<double> read_smp(const ParameterStore& store, const char* block, const BackboneConfig& cfg) {
  auto smp = SmpParams<double>::Zero(cfg.channels, cfg.reduction, cfg.smp_layers);
  for (std::size_t k = 0; k < smp.layers.size(); ++k) {
    smp.layers[k].weight = store.at(smp_name(block, k, "weight"));
    smp.layers[k].bias = store.at(smp_name(block, k, "bias"));
  }
  return smp;
}

void write_smp(ParameterStore& store, const char* block, const SmpParams<double>& smp) {
  for (std::size_t k = 0; k < smp.layers.size(); ++k) {
    store.set(smp_name(block, k, "weight"), smp.layers[k].weight);
    store.set(smp_name(block, k, "bias"), smp.layers[k].bias);
  }
}

BatchNormParams<double> read_bn(const ParameterStore& store, const char* block) {
  auto get = [&](const char* field) -> Eigen::VectorXd { return store.at(std::string(block) + "." + field); };
  return {get("running_mean"), get("running_var"), get("scale"), get("shift")};
}

void write_bn(ParameterStore& store, const char* block, const BatchNormParams<double>& bn) {
  store.set(std::string(block) + ".running_mean", bn.running_mean);
  store.set(std::string(block) + ".running_var", bn.running_var);
  store.set(std::string(block) + ".scale", bn.scale);
  store.set(std::string(block) + ".shift", bn.shift);
}

}  // namespace

void BackboneConfig::validate() const {
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  if (channels < 2) throw ConfigError("feature maps need at least 2 channels");
  if (height < 2) throw ConfigError("feature maps need H >= 2 to split into halves");
  if (width < 1) throw ConfigError("feature map width must be >= 1");
  if (depth != 1 && depth != 2) throw ConfigError("encoder depth must be 1 or 2");
  if (depth == 2 && hidden < 1) throw ConfigError("hidden width must be >= 1");
  if (classes < 1) throw ConfigError("class count must be >= 1");
  try {
    smp_layer_sizes(channels, reduction, smp_layers);
  } catch (const ShapeError& e) {
    throw ConfigError(e.what());
  }
}

std::vector<std::pair<std::string, std::pair<Index, Index>>> DeskBackbone::layout(const BackboneConfig& cfg) {
  std::vector<std::pair<std::string, std::pair<Index, Index>>> out;
  if (cfg.depth == 2) {
    out.push_back({encoder_name(0, "weight"), {cfg.hidden, cfg.input_dim}});
    out.push_back({encoder_name(0, "bias"), {cfg.hidden, 1}});
    out.push_back({encoder_name(1, "weight"), {cfg.map_size(), cfg.hidden}});
    out.push_back({encoder_name(1, "bias"), {cfg.map_size(), 1}});
  } else {
    out.push_back({encoder_name(0, "weight"), {cfg.map_size(), cfg.input_dim}});
    out.push_back({encoder_name(0, "bias"), {cfg.map_size(), 1}});
  }
  out.push_back({"head.weight", {cfg.classes, cfg.channels}});
  out.push_back({"head.bias", {cfg.classes, 1}});
  const auto sizes = smp_layer_sizes(cfg.channels, cfg.reduction, cfg.smp_layers);
  for (const char* block : kSmpBlocks) {
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
      out.push_back({smp_name(block, k, "weight"), {sizes[k + 1], sizes[k]}});
      out.push_back({smp_name(block, k, "bias"), {sizes[k + 1], 1}});
    }
  }
  for (const char* block : kBnBlocks) {
    for (const char* field : kBnFields) out.push_back({std::string(block) + "." + field, {cfg.channels, 1}});
  }
  return out;
}

DeskBackbone::DeskBackbone(BackboneConfig config, ParameterStore params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  const auto expected = layout(config_);
  if (expected.size() != params_.size()) throw CongruenceError("parameter store does not match the backbone layout");
  for (const auto& [name, shape] : expected) {
    if (!params_.contains(name)) throw CongruenceError("missing parameter '" + name + "'");
    const auto& v = params_.at(name);
    if (v.rows() != shape.first || v.cols() != shape.second) {
      throw CongruenceError("parameter '" + name + "' has the wrong shape");
    }
  }
}

DeskBackbone DeskBackbone::initialize(const BackboneConfig& config, Pcg32& rng) {
  config.validate();
  ParameterStore store;
  for (Index layer = 0; layer < config.depth; ++layer) {
    const Index in = layer == 0 ? config.input_dim : config.hidden;
    const Index out = layer + 1 == config.depth ? config.map_size() : config.hidden;
    store.set(encoder_name(layer, "weight"), glorot(out, in, rng));
    store.set(encoder_name(layer, "bias"), Eigen::VectorXd::Zero(out));
  }
  store.set("head.weight", glorot(config.classes, config.channels, rng));
  store.set("head.bias", Eigen::VectorXd::Zero(config.classes));
  for (const char* block : kSmpBlocks) {
    write_smp(store, block, SmpParams<double>::Random(config.channels, config.reduction, config.smp_layers, rng));
  }
  for (const char* block : kBnBlocks) write_bn(store, block, BatchNormParams<double>::Identity(config.channels));
  return DeskBackbone(config, std::move(store));
}

FeatureMap<double> DeskBackbone::encode(const Eigen::VectorXd& x) const {
  if (x.size() != config_.input_dim) throw ShapeError("backbone input has the wrong length");
  Eigen::VectorXd h = x;
  for (Index layer = 0; layer < config_.depth; ++layer) {
    h = (params_.at(encoder_name(layer, "weight")) * h + params_.at(encoder_name(layer, "bias")))
            .cwiseMax(0.0);
  }
  return FeatureMap<double>::FromFlat(h, config_.channels, config_.height, config_.width);
}

DeskBackbone::Output DeskBackbone::forward(const Eigen::VectorXd& x) const {
  Output out;
  out.map = encode(x);
  auto pooled = pool_streams(out.map);
  out.global = std::move(pooled.global);
  out.top = std::move(pooled.top);
  out.bottom = std::move(pooled.bottom);
  return out;
}

Activations DeskBackbone::forward_batch(const Eigen::MatrixXd& inputs) const {
  if (inputs.rows() != config_.input_dim) throw ShapeError("backbone batch has the wrong input length");
  Activations acts;
  acts.store_identity = params_.identity();
  acts.store_revision = params_.revision();
  Eigen::MatrixXd h = inputs;
  for (Index layer = 0; layer < config_.depth; ++layer) {
    acts.inputs.push_back(h);
    Eigen::MatrixXd z = params_.at(encoder_name(layer, "weight")) * h;
    z.colwise() += params_.at(encoder_name(layer, "bias")).col(0);
    h = z.cwiseMax(0.0);
    acts.pre.push_back(std::move(z));
  }
  acts.maps = std::move(h);
  return acts;
}

FeatureMap<double> DeskBackbone::map_at(const Activations& acts, Index sample) const {
  return FeatureMap<double>::FromFlat(acts.maps.col(sample), config_.channels, config_.height, config_.width);
}

PooledBatch DeskBackbone::pool(const Activations& acts) const {
  const Index c = config_.channels;
  const Index hw = config_.height * config_.width;
  const Index top = config_.top_rows() * config_.width;
  const Index n = acts.samples();
  PooledBatch out{Eigen::MatrixXd(c, n), Eigen::MatrixXd(c, n), Eigen::MatrixXd(c, n)};
  for (Index ch = 0; ch < c; ++ch) {
    const auto block = acts.maps.middleRows(ch * hw, hw);
    out.top.row(ch) = block.topRows(top).colwise().mean();
    out.bottom.row(ch) = block.bottomRows(hw - top).colwise().mean();
    out.global.row(ch) = block.colwise().mean();
  }
  return out;
}

ParameterStore DeskBackbone::backward_maps(const Activations& acts, const Eigen::MatrixXd& d_maps) const {
  if (acts.store_identity != params_.identity() || acts.store_revision != params_.revision()) {
    throw StateError("activations are stale: parameters changed since forward_batch");
  }
  if (d_maps.rows() != config_.map_size() || d_maps.cols() != acts.samples()) {
    throw ShapeError("map gradient has the wrong shape");
  }
  ParameterStore grads = params_.zeros_like();
  Eigen::MatrixXd g = d_maps;
  for (Index layer = config_.depth; layer-- > 0;) {
    const auto sl = static_cast<std::size_t>(layer);
    g = (acts.pre[sl].array() > 0.0).select(g, 0.0);
    grads.mutable_entry(encoder_name(layer, "weight")) = g * acts.inputs[sl].transpose();
    grads.mutable_entry(encoder_name(layer, "bias")) = g.rowwise().sum();
    if (layer > 0) g = params_.at(encoder_name(layer, "weight")).transpose() * g;
  }
  return grads;
}

ParameterStore DeskBackbone::backward(const Activations& acts, const PooledBatch& d_pooled) const {
  const Index c = config_.channels;
  const Index hw = config_.height * config_.width;
  const Index top = config_.top_rows() * config_.width;
  const Index n = acts.samples();
  Eigen::MatrixXd d_maps(config_.map_size(), n);
  for (Index ch = 0; ch < c; ++ch) {
    auto block = d_maps.middleRows(ch * hw, hw);
    for (Index p = 0; p < hw; ++p) {
      block.row(p) = d_pooled.global.row(ch) / static_cast<double>(hw);
      if (p < top) {
        block.row(p) += d_pooled.top.row(ch) / static_cast<double>(top);
      } else {
        block.row(p) += d_pooled.bottom.row(ch) / static_cast<double>(hw - top);
      }
    }
  }
  return backward_maps(acts, d_maps);
}

ClassifierHead<double> DeskBackbone::head() const {
  return {params_.at("head.weight"), params_.at("head.bias").col(0)};
}

void DeskBackbone::set_head(const ClassifierHead<double>& head) {
  if (head.weight.cols() != config_.channels || head.bias.size() != head.weight.rows()) {
    throw ShapeError("classifier head must map C features to M classes");
  }
  config_.classes = head.weight.rows();
  params_.set("head.weight", head.weight);
  params_.set("head.bias", head.bias);
}

FusionParams<double> DeskBackbone::fusion() const {
  return {read_smp(params_, kSmpBlocks[0], config_), read_smp(params_, kSmpBlocks[1], config_),
          read_smp(params_, kSmpBlocks[2], config_), read_bn(params_, kBnBlocks[0]),
          read_bn(params_, kBnBlocks[1])};
}

void DeskBackbone::set_fusion(const FusionParams<double>& fusion) {
  write_smp(params_, kSmpBlocks[0], fusion.ecab_top);
  write_smp(params_, kSmpBlocks[1], fusion.ecab_bottom);
  write_smp(params_, kSmpBlocks[2], fusion.secab_global);
  write_bn(params_, kBnBlocks[0], fusion.bn_top);
  write_bn(params_, kBnBlocks[1], fusion.bn_bottom);
}

void accumulate_fusion_grads(ParameterStore& grads, const FusionParams<double>& d_fusion) {
  const SmpParams<double>* smps[] = {&d_fusion.ecab_top, &d_fusion.ecab_bottom, &d_fusion.secab_global};
  for (int b = 0; b < 3; ++b) {
    for (std::size_t k = 0; k < smps[b]->layers.size(); ++k) {
      grads.mutable_entry(smp_name(kSmpBlocks[b], k, "weight")) += smps[b]->layers[k].weight;
      grads.mutable_entry(smp_name(kSmpBlocks[b], k, "bias")) += smps[b]->layers[k].bias;
    }
  }
  const BatchNormParams<double>* bns[] = {&d_fusion.bn_top, &d_fusion.bn_bottom};
  for (int b = 0; b < 2; ++b) {
    grads.mutable_entry(std::string(kBnBlocks[b]) + ".scale") += bns[b]->scale;
    grads.mutable_entry(std::string(kBnBlocks[b]) + ".shift") += bns[b]->shift;
  }
}

OptimizerState OptimizerState::for_params(const ParameterStore& params, double learning_rate,
                                          double weight_decay) {
  OptimizerState s;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  s.learning_rate = learning_rate;
  s.weight_decay = weight_decay;
  return s;
}

void OptimizerState::reset_entry(const std::string& name, Index rows, Index cols) {
  first_moment.set(name, Eigen::MatrixXd::Zero(rows, cols));
  second_moment.set(name, Eigen::MatrixXd::Zero(rows, cols));
}

void adam_step(ParameterStore& params, const ParameterStore& grads, OptimizerState& state) {
  require_congruent(params, grads, "adam_step");
  require_congruent(params, state.first_moment, "adam_step (first moment)");
  require_congruent(params, state.second_moment, "adam_step (second moment)");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& [name, g] : grads.entries()) {
    if (is_buffer(name)) continue;
    auto& m = state.first_moment.mutable_entry(name);
    auto& v = state.second_moment.mutable_entry(name);
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseAbs2();
    auto& theta = params.mutable_entry(name);
    const Eigen::ArrayXXd update = (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
    theta.array() -= state.learning_rate * (update + state.weight_decay * theta.array());
  }
}

}  // namespace reid
