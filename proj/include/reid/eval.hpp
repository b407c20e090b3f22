#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "reid/featureset.hpp"

namespace reid {

/// Gallery indices sorted most-similar first, with relevance flags.
struct RankingResult {
  std::uint32_t query_id = 0;
  std::vector<Index> order;
  std::vector<char> relevant;  // relevant[j] belongs to order[j]

  std::size_t relevant_count() const;
  /// 1-based rank of the first relevant entry, 0 when there is none.
  std::size_t first_hit() const;
};

enum class ApMode { kStandard, kPaperLiteral };

struct EvalReport {
  double map_standard = 0;
  double map_paper = 0;
  std::map<int, double> rank_at;  // k in {1, 5, 10}
  std::vector<double> cmc;        // cmc[k - 1]
  std::vector<std::uint32_t> query_ids;
  std::vector<double> ap_standard;  // per query
  std::vector<std::size_t> first_hits;
};

/// Features (one column per sample) with their labels, the evaluation view of
/// a list of records.
struct LabeledFeatures {
  Eigen::MatrixXd features;
  std::vector<std::int32_t> identities;
  std::vector<std::int32_t> cameras;  // -1 when unknown
  std::vector<std::uint32_t> ids;

  Index size() const { return features.cols(); }
};

LabeledFeatures labeled_features(std::span<const SampleRecord> records);

/// Ascending L2 distance, ties by ascending gallery index. With
/// filter_same_camera, entries sharing both identity and camera with the query
/// are dropped before ranking.
RankingResult rank_gallery(const Eigen::Ref<const Eigen::VectorXd>& query, std::int32_t query_identity,
                           std::int32_t query_camera, const LabeledFeatures& gallery,
                           bool filter_same_camera, std::uint32_t query_id = 0);

RankingResult rank_gallery(const SampleRecord& query, std::span<const SampleRecord> gallery,
                           bool filter_same_camera);

/// Fraction of queries with a relevant entry in the top k.
double rank_k_accuracy(std::span<const RankingResult> rankings, std::size_t k);

/// Standard: sum_j p(j) gt(j) / #relevant. kPaperLiteral: the same sum over
/// the ranked gallery size N.
double average_precision(const RankingResult& ranking, ApMode mode);

double mean_ap(std::span<const RankingResult> rankings, ApMode mode);

/// curve[k - 1] = rank_k_accuracy(rankings, k), k = 1 .. longest ranking.
std::vector<double> cmc_curve(std::span<const RankingResult> rankings);

EvalReport summarize(std::span<const RankingResult> rankings);

EvalReport evaluate(const LabeledFeatures& query, const LabeledFeatures& gallery,
                    bool filter_same_camera = false);

}  // namespace reid
