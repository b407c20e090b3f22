#include "reid/eval.hpp"

#include <algorithm>
#include <numeric>

#include "reid/parallel.hpp"

namespace reid {

std::size_t RankingResult::relevant_count() const {
  return static_cast<std::size_t>(std::count(relevant.begin(), relevant.end(), 1));
}

std::size_t RankingResult::first_hit() const {
  for (std::size_t j = 0; j < relevant.size(); ++j) {
    if (relevant[j]) return j + 1;
  }
  return 0;
}

LabeledFeatures labeled_features(std::span<const SampleRecord> records) {
  LabeledFeatures out;
  out.features = feature_matrix(records);
  for (const auto& r : records) {
    if (!r.identity) throw EvaluationError("record " + std::to_string(r.id) + " has no identity");
    out.identities.push_back(*r.identity);
    out.cameras.push_back(r.camera.value_or(-1));
    out.ids.push_back(r.id);
  }
  return out;
}

RankingResult rank_gallery(const Eigen::Ref<const Eigen::VectorXd>& query, std::int32_t query_identity,
                           std::int32_t query_camera, const LabeledFeatures& gallery,
                           bool filter_same_camera, std::uint32_t query_id) {
  if (gallery.size() > 0 && gallery.features.rows() != query.size()) {
    throw ShapeError("query and gallery features differ in length");
  }
  if (filter_same_camera && query_camera < 0) {
    throw EvaluationError("same-camera filtering needs a query camera id");
  }
  std::vector<Index> eligible;
  std::vector<double> dist(static_cast<std::size_t>(gallery.size()));
  for (Index j = 0; j < gallery.size(); ++j) {
    const auto sj = static_cast<std::size_t>(j);
    if (filter_same_camera) {
      if (gallery.cameras[sj] < 0) throw EvaluationError("same-camera filtering needs gallery camera ids");
      if (gallery.identities[sj] == query_identity && gallery.cameras[sj] == query_camera) continue;
    }
    dist[sj] = (gallery.features.col(j) - query).squaredNorm();
    eligible.push_back(j);
  }
  if (eligible.empty()) throw EvaluationError("no eligible gallery entries for query");
  std::stable_sort(eligible.begin(), eligible.end(), [&](Index a, Index b) {
    return dist[static_cast<std::size_t>(a)] < dist[static_cast<std::size_t>(b)];
  });
  RankingResult out{query_id, eligible, {}};
  out.relevant.reserve(eligible.size());
  for (Index j : eligible) {
    out.relevant.push_back(gallery.identities[static_cast<std::size_t>(j)] == query_identity ? 1 : 0);
  }
  return out;
}

RankingResult rank_gallery(const SampleRecord& query, std::span<const SampleRecord> gallery,
                           bool filter_same_camera) {
  if (!query.identity) throw EvaluationError("query has no identity");
  const LabeledFeatures g = labeled_features(gallery);
  return rank_gallery(query.values.cast<double>(), *query.identity, query.camera.value_or(-1), g,
                      filter_same_camera, query.id);
}

double rank_k_accuracy(std::span<const RankingResult> rankings, std::size_t k) {
  if (k < 1) throw EvaluationError("rank-k needs k >= 1");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& r : rankings) {
    const auto first = r.first_hit();
    if (first != 0 && first <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

double average_precision(const RankingResult& ranking, ApMode mode) {
  long double sum = 0.0L;
  std::size_t found = 0;
  for (std::size_t j = 0; j < ranking.relevant.size(); ++j) {
    if (!ranking.relevant[j]) continue;
    ++found;
    sum += static_cast<long double>(found) / static_cast<long double>(j + 1);
  }
  if (found == 0) throw EvaluationError("average precision needs at least one relevant entry");
  const auto denom = mode == ApMode::kStandard ? static_cast<long double>(found)
                                               : static_cast<long double>(ranking.relevant.size());
  return static_cast<double>(sum / denom);
}

double mean_ap(std::span<const RankingResult> rankings, ApMode mode) {
  if (rankings.empty()) throw EvaluationError("mAP over zero queries");
  double sum = 0.0;
  for (const auto& r : rankings) sum += average_precision(r, mode);
  return sum / static_cast<double>(rankings.size());
}

std::vector<double> cmc_curve(std::span<const RankingResult> rankings) {
  std::size_t depth = 0;
  for (const auto& r : rankings) depth = std::max(depth, r.relevant.size());
  std::vector<double> hits_at(depth + 1, 0.0);
  for (const auto& r : rankings) {
    const auto first = r.first_hit();
    if (first != 0) hits_at[first] += 1.0;
  }
  std::vector<double> curve(depth, 0.0);
  double acc = 0.0;
  for (std::size_t k = 1; k <= depth; ++k) {
    acc += hits_at[k];
    curve[k - 1] = acc / static_cast<double>(rankings.size());
  }
  return curve;
}

EvalReport summarize(std::span<const RankingResult> rankings) {
  EvalReport report;
  report.map_standard = mean_ap(rankings, ApMode::kStandard);
  report.map_paper = mean_ap(rankings, ApMode::kPaperLiteral);
  for (int k : {1, 5, 10}) report.rank_at[k] = rank_k_accuracy(rankings, static_cast<std::size_t>(k));
  report.cmc = cmc_curve(rankings);
  for (const auto& r : rankings) {
    report.query_ids.push_back(r.query_id);
    report.ap_standard.push_back(average_precision(r, ApMode::kStandard));
    report.first_hits.push_back(r.first_hit());
  }
  return report;
}

EvalReport evaluate(const LabeledFeatures& query, const LabeledFeatures& gallery, bool filter_same_camera) {
  if (query.size() == 0) throw EvaluationError("no queries to evaluate");
  std::vector<RankingResult> rankings(static_cast<std::size_t>(query.size()));
  parallel_for(rankings.size(), [&](std::size_t i) {
    const auto qi = static_cast<Index>(i);
    rankings[i] = rank_gallery(query.features.col(qi), query.identities[i], query.cameras[i], gallery,
                               filter_same_camera, query.ids[i]);
  });
  return summarize(rankings);
}

}  // namespace reid
