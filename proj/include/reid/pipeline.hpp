#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "reid/checkpoint.hpp"
#include "reid/clustering.hpp"
#include "reid/config.hpp"
#include "reid/deskmodel.hpp"
#include "reid/eval.hpp"
#include "reid/featureset.hpp"
#include "reid/losses.hpp"
#include "reid/teacher.hpp"

namespace reid {

struct PipelineConfig {
  std::filesystem::path source;  // split stem: <stem>.{train,query,gallery}.fset
  std::filesystem::path target;
  std::filesystem::path checkpoint_dir = ".";

  // input_dim and classes are taken from the data.
  BackboneConfig backbone;

  Index k_global = 64;
  Index k_top = 48;
  Index k_bottom = 48;
  ClusterConfig clustering;  // k and seed are set per stream and epoch
  bool use_secab = true;

  LossConfig loss;
  EmaConfig ema{0.98};

  Index pretrain_epochs = 10;
  Index pretrain_iterations = 50;
  Index epochs = 10;
  Index iterations_per_epoch = 50;
  Index batch_identities = 8;  // P
  Index batch_instances = 4;   // K

  double pretrain_lr = 3e-3;
  double finetune_lr = 1e-2;
  double weight_decay = 5e-4;
  // Target classifier rows are re-created as head_scale * unit centroid.
  double head_scale = 10.0;
  double bn_momentum = 0.1;
  bool evaluate_each_epoch = true;
  std::uint64_t seed = 0;

  Index batch_size() const { return batch_identities * batch_instances; }
  void validate() const;

  /// Reads every known key from `file` (see README for the table); unknown
  /// keys are rejected.
  static PipelineConfig from_config(ConfigFile& file);
};

struct EpochRecord {
  Index epoch = 0;
  double loss = 0;  // mean total objective over the epoch's iterations
  double id = 0;
  double triplet = 0;
  double triplet_top = 0;
  double triplet_bottom = 0;
  std::optional<std::array<double, 3>> inertia;  // global, top, bottom
  std::optional<double> eval_map;
  std::optional<double> eval_rank1;
  double wall_seconds = 0;
};

/// One record per completed epoch, appended in order.
class RunLog {
 public:
  explicit RunLog(std::string stage = "") : stage_(std::move(stage)) {}

  void append(EpochRecord record);
  const std::vector<EpochRecord>& epochs() const { return epochs_; }
  const std::string& stage() const { return stage_; }

  /// Wall times are left out unless asked for, so logs of equal runs compare
  /// equal as text.
  nlohmann::json to_json(bool include_wall_time = false) const;
  std::string to_csv() const;

 private:
  std::string stage_;
  std::vector<EpochRecord> epochs_;
};

/// P labels drawn without replacement among labels with >= 2 members, K
/// indices each (all members first when a label has fewer than K, then
/// repeats drawn with replacement).
std::vector<Index> sample_pk(const std::vector<int>& labels, Index p, Index k, Pcg32& rng);

/// BMFN features for the three streams, one column per input sample, plus the
/// cached activations for the original and flipped inputs.
struct Embedding {
  Activations acts;
  PooledBatch pooled;  // 2n columns: originals then flips
  PooledBatch features;
};

Embedding embed_batch(const DeskBackbone& model, const Eigen::MatrixXd& inputs);
ParameterStore embed_backward(const DeskBackbone& model, const Embedding& emb, const PooledBatch& d_features);

/// Inference descriptors (teacher path, no fusion) for a list of records.
LabeledFeatures inference_features(const DeskBackbone& model, std::span<const SampleRecord> records);

/// Fused theta features of every sample and its flip, BMFN-combined, plus the
/// pre-batch-norm pooled fused values (2n columns) for running statistics.
struct FusedFeatures {
  Eigen::MatrixXd phi_top;
  Eigen::MatrixXd phi_bottom;
  Eigen::MatrixXd pooled_top;
  Eigen::MatrixXd pooled_bottom;
};

FusedFeatures fused_features(const DeskBackbone& student, const DeskBackbone& teacher,
                             const Eigen::MatrixXd& inputs, FusionOptions options);

struct PretrainResult {
  DeskBackbone model;
  Checkpoint checkpoint;
  RunLog log;
};

PretrainResult pretrain_source(const PipelineConfig& cfg, const DatasetSplit& source);

struct FinetuneResult {
  DeskBackbone student;
  DeskBackbone teacher;
  Checkpoint checkpoint;  // "student." and "teacher." entries
  RunLog log;
  std::array<double, 3> final_inertia{};
  std::array<PseudoLabels, 3> labels;
};

FinetuneResult finetune_target(const PipelineConfig& cfg, const Checkpoint& pretrained,
                               const DatasetSplit& target);

/// Pre-trained network evaluated on a split's query/gallery.
EvalReport direct_transfer_eval(const DeskBackbone& model, const DatasetSplit& split);
EvalReport direct_transfer_eval(const Checkpoint& pretrained, const DatasetSplit& split);

nlohmann::json eval_to_json(const EvalReport& report);
std::string eval_per_query_csv(const EvalReport& report);

// ---------------------------------------------------------------------------
// Synthetic benchmark

struct BenchConfig {
  SynthConfig data;
  PipelineConfig pipeline;
  std::vector<Index> k_sweep{32, 96};  // alternative k_global values
  bool ablations = true;
};

struct BenchCell {
  std::string name;
  std::string seeding;
  bool use_secab = true;
  Index k_global = 0;
  Index k_top = 0;
  Index k_bottom = 0;
  double map_standard = 0;
  double map_paper = 0;
  double rank1 = 0;
  double rank5 = 0;
  double rank10 = 0;
  double mean_final_inertia = 0;  // mean over the three streams
};

struct BenchReport {
  std::uint64_t seed = 0;
  double source_map = 0;  // pre-trained network on the source test split
  std::vector<BenchCell> cells;
  RunLog pretrain_log;
  RunLog finetune_log;  // "full" cell

  const BenchCell& cell(const std::string& name) const;
};

BenchReport synth_bench(std::uint64_t seed, const BenchConfig& config = {});
nlohmann::json bench_to_json(const BenchReport& report);
std::string bench_to_csv(const BenchReport& report);

/// Paired-seed comparison of greedy vs random seeding and SECAB on vs off.
struct AblationReport {
  std::vector<std::uint64_t> seeds;
  std::vector<double> map_greedy;
  std::vector<double> map_random;
  std::vector<double> map_secab_on;
  std::vector<double> map_secab_off;
  std::vector<double> inertia_greedy;
  std::vector<double> inertia_random;
  double greedy_win_rate = 0;
  double secab_win_rate = 0;
  double threshold = 0.6;
  bool greedy_pass = false;
  bool secab_pass = false;
};

AblationReport ablation_study(const BenchConfig& config, std::uint64_t first_seed, Index count);
nlohmann::json ablation_to_json(const AblationReport& report);

}  // namespace reid
