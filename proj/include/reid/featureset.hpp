#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "reid/tensor.hpp"

namespace reid {

enum class Domain : std::uint8_t { kSource = 0, kTarget = 1 };

/// Payload shape shared by every record of a feature set: rank 1 {D} or
/// rank 3 {C, H, W}.
struct FeatureShape {
  std::vector<std::uint32_t> dims;

  std::size_t rank() const { return dims.size(); }
  std::size_t size() const;
  static FeatureShape vector(std::uint32_t d) { return {{d}}; }
  static FeatureShape map(std::uint32_t c, std::uint32_t h, std::uint32_t w) { return {{c, h, w}}; }
  bool operator==(const FeatureShape&) const = default;
};

struct SampleRecord {
  std::uint32_t id = 0;
  Eigen::VectorXf values;  // row-major (channel-major for rank 3)
  std::optional<std::int32_t> identity;
  std::optional<std::int32_t> camera;
  Domain domain = Domain::kSource;

  bool operator==(const SampleRecord& other) const;
};

/// One FEATSET file: an ordered list of records with a common shape.
struct FeatureSet {
  FeatureShape shape;
  std::vector<SampleRecord> records;

  bool operator==(const FeatureSet&) const = default;
};

struct DatasetSplit {
  FeatureShape shape;
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> gallery;
  std::vector<SampleRecord> query;
  std::int64_t identity_count = 0;

  bool operator==(const DatasetSplit&) const = default;
};

/// Number of distinct identities among records that carry one.
std::int64_t count_identities(std::span<const SampleRecord> records);

/// Validates the split invariants: every source record labelled, every query
/// identity present in the gallery, identity_count consistent with train.
void validate_split(const DatasetSplit& split);

FeatureSet load_featset(const std::filesystem::path& path);
void save_featset(const FeatureSet& set, const std::filesystem::path& path);

/// A split lives in three files next to each other:
/// <stem>.train.fset, <stem>.query.fset, <stem>.gallery.fset.
DatasetSplit load_split(const std::filesystem::path& stem);
void save_split(const DatasetSplit& split, const std::filesystem::path& stem);
std::filesystem::path split_part_path(const std::filesystem::path& stem, const std::string& part);

/// Optional "<name>.meta.json" provenance sidecar. Never read back by the
/// loaders.
void write_sidecar(const std::filesystem::path& featset_path, const std::string& json_text);

/// Identity count when the original train and test identities of a source
/// dataset are merged for pre-training.
constexpr std::int64_t merged_identity_count(std::int64_t train_ids, std::int64_t test_ids) {
  return train_ids + test_ids;
}

/// Columns are samples; rank-3 payloads are flattened channel-major.
Eigen::MatrixXd feature_matrix(std::span<const SampleRecord> records);

struct SynthConfig {
  std::int32_t identities = 64;
  std::int32_t samples_per_id = 20;
  std::int32_t dim = 32;
  double domain_shift_scale = 2.0;
  double noise_scale = 0.2;
  // Extra noise confined to the complement of the identity subspace.
  double nuisance_scale = 0.2;
  std::uint64_t seed = 0;
  // Held-out evaluation identities (disjoint from train identities).
  std::int32_t test_identities = 32;
  std::int32_t query_per_id = 2;
  std::int32_t gallery_per_id = 8;
  std::int32_t cameras = 6;
  // Identity subspace rank; 0 selects min(dim / 4, (ceil(dim / 2) - 1) / 2).
  std::int32_t latent_dim = 0;
};

/// Desk-scale two-domain data.
///
/// Identity centres are Gaussian in a rank-L subspace spanned by the first L
/// columns of a seeded random orthonormal basis Q of the reversal-symmetric
/// vectors, so reversing a sample's coordinates (the desk flip) keeps its
/// identity. Samples are centre + isotropic noise + nuisance noise orthogonal
/// to the domain's identity subspace. The target generator rotates the
/// subspace by theta = (pi/2) * s / (1 + s) toward columns L..2L-1 of Q and
/// translates by 0.5 * s along column 2L, where s is domain_shift_scale, so
/// s = 0 reproduces the source generator exactly. Target identities are
/// sampled fresh and labelled disjointly from source identities.
std::pair<DatasetSplit, DatasetSplit> synth_generate(const SynthConfig& config);

}  // namespace reid
