#include <doctest.h>

#include <map>
#include <set>

#include "reid/pipeline.hpp"
#include "support.hpp"

using namespace reid;

namespace {

BenchConfig tiny() {
  BenchConfig b;
  b.data.identities = 12;
  b.data.samples_per_id = 6;
  b.data.test_identities = 6;
  b.pipeline.k_global = 10;
  b.pipeline.k_top = 8;
  b.pipeline.k_bottom = 8;
  b.pipeline.pretrain_epochs = 2;
  b.pipeline.pretrain_iterations = 5;
  b.pipeline.epochs = 2;
  b.pipeline.iterations_per_epoch = 5;
  b.pipeline.batch_identities = 4;
  b.pipeline.batch_instances = 3;
  b.k_sweep = {6};
  return b;
}

}  // namespace

TEST_CASE("pk sampling") {
  std::vector<int> labels{0, 0, 0, 0, 0, 1, 1, 2, 3, 3, 3};
  Pcg32 rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto idx = sample_pk(labels, 2, 4, rng);
    REQUIRE(idx.size() == 8);
    std::map<int, int> per_label;
    for (Index i : idx) ++per_label[labels[static_cast<std::size_t>(i)]];
    CHECK(per_label.size() == 2);
    CHECK(!per_label.contains(2));
    for (auto [y, c] : per_label) CHECK(c == 4);
  }
  // A label with five members yields four distinct samples.
  Pcg32 rng2(2);
  const std::vector<int> one_big{0, 0, 0, 0, 0, 1, 1};
  const auto idx = sample_pk(one_big, 2, 4, rng2);
  std::set<Index> zeros;
  for (Index i : idx) {
    if (one_big[static_cast<std::size_t>(i)] == 0) zeros.insert(i);
  }
  CHECK(zeros.size() == 4);
  CHECK_THROWS_AS(sample_pk({0, 0, 1}, 2, 2, rng), BatchStructureError);
}

TEST_CASE("inference descriptors are unit length") {
  BenchConfig b = tiny();
  const auto [src, tgt] = synth_generate(b.data);
  Pcg32 rng(3);
  BackboneConfig cfg;
  const DeskBackbone model = DeskBackbone::initialize(cfg, rng);
  const LabeledFeatures f = inference_features(model, src.query);
  CHECK(f.features.rows() == 3 * cfg.channels);
  for (Index i = 0; i < f.size(); ++i) {
    const double n = f.features.col(i).norm();
    CHECK((n == doctest::Approx(1.0) || n == 0.0));
  }
}

TEST_CASE("training stages are deterministic") {
  const BenchConfig b = tiny();
  const auto [src, tgt] = synth_generate(b.data);
  const PretrainResult p1 = pretrain_source(b.pipeline, src);
  const PretrainResult p2 = pretrain_source(b.pipeline, src);
  CHECK(serialize_checkpoint(p1.checkpoint) == serialize_checkpoint(p2.checkpoint));
  CHECK(p1.log.to_json() == p2.log.to_json());
  CHECK(p1.log.epochs().size() == 2);

  const FinetuneResult f1 = finetune_target(b.pipeline, p1.checkpoint, tgt);
  const FinetuneResult f2 = finetune_target(b.pipeline, p1.checkpoint, tgt);
  CHECK(serialize_checkpoint(f1.checkpoint) == serialize_checkpoint(f2.checkpoint));
  CHECK(f1.log.to_json().dump() == f2.log.to_json().dump());
  for (const auto& l : f1.labels) CHECK(l.labels.size() == tgt.train.size());
  CHECK(f1.teacher.config().classes == 10);
  CHECK(f1.log.epochs().back().inertia.has_value());
  CHECK(f1.log.to_csv().find("finetune,1,") != std::string::npos);
  CHECK(!(f1.teacher.params() == f1.student.params()));
  CHECK(direct_transfer_eval(f1.checkpoint, tgt).map_standard ==
        direct_transfer_eval(f1.teacher, tgt).map_standard);
}

TEST_CASE("finetune rejects a mismatched checkpoint") {
  BenchConfig b = tiny();
  const auto [src, tgt] = synth_generate(b.data);
  const PretrainResult p = pretrain_source(b.pipeline, src);
  b.data.dim = 16;
  b.data.latent_dim = 2;
  const auto other = synth_generate(b.data).second;
  CHECK_THROWS_AS(finetune_target(b.pipeline, p.checkpoint, other), CongruenceError);
}

TEST_CASE("benchmark report has one row per cell") {
  const BenchConfig b = tiny();
  const BenchReport r = synth_bench(5, b);
  std::vector<std::string> names;
  for (const auto& c : r.cells) names.push_back(c.name);
  CHECK(names == std::vector<std::string>{"direct_transfer", "full", "random_seeding", "no_secab", "k_global_6"});
  CHECK(bench_to_json(r).dump() == bench_to_json(synth_bench(5, b)).dump());
  const std::string csv = bench_to_csv(r);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
  CHECK_THROWS_AS(r.cell("nope"), StateError);
}
