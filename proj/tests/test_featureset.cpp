#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "reid/featureset.hpp"

using namespace reid;

namespace {

std::filesystem::path scratch_dir(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "reid_uda_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("featset round trip keeps records bit-exact") {
  FeatureSet set{FeatureShape::map(2, 2, 1), {}};
  for (std::uint32_t i = 0; i < 5; ++i) {
    SampleRecord r;
    r.id = i;
    r.values = Eigen::VectorXf::LinSpaced(4, 0.1f * i, 1.7f + i);
    if (i % 2 == 0) r.identity = static_cast<std::int32_t>(i / 2);
    if (i != 3) r.camera = static_cast<std::int32_t>(i);
    r.domain = i < 2 ? Domain::kSource : Domain::kTarget;
    set.records.push_back(r);
  }
  const auto path = scratch_dir("roundtrip") / "a.fset";
  save_featset(set, path);
  CHECK(load_featset(path) == set);
}

TEST_CASE("featset loader rejects bad input") {
  const auto dir = scratch_dir("bad");
  {
    std::ofstream out(dir / "magic.fset", std::ios::binary);
    out << "NOTAFEATSETFILE";
  }
  CHECK_THROWS_AS(load_featset(dir / "magic.fset"), FormatError);
  CHECK_THROWS_AS(load_featset(dir / "missing.fset"), DataError);

  FeatureSet set{FeatureShape::vector(3), {}};
  SampleRecord r;
  r.values = Eigen::VectorXf::Ones(3);
  set.records.push_back(r);
  save_featset(set, dir / "ok.fset");
  const auto size = std::filesystem::file_size(dir / "ok.fset");
  std::filesystem::resize_file(dir / "ok.fset", size - 2);
  CHECK_THROWS_AS(load_featset(dir / "ok.fset"), FormatError);

  r.values = Eigen::VectorXf::Ones(2);
  set.records.push_back(r);
  CHECK_THROWS_AS(save_featset(set, dir / "shape.fset"), ShapeError);
}

TEST_CASE("merged identity count adds train and test identities") {
  CHECK(merged_identity_count(751, 750) == 1501);
  static_assert(merged_identity_count(0, 5) == 5);
}

TEST_CASE("synthetic pair is deterministic and well formed") {
  SynthConfig cfg;
  cfg.seed = 11;
  const auto [src, tgt] = synth_generate(cfg);
  const auto [src2, tgt2] = synth_generate(cfg);
  CHECK(src == src2);
  CHECK(tgt == tgt2);
  for (const auto* split : {&src, &tgt}) {
    validate_split(*split);
    CHECK(split->shape == FeatureShape::vector(static_cast<std::uint32_t>(cfg.dim)));
    CHECK(split->train.size() == static_cast<std::size_t>(cfg.identities * cfg.samples_per_id));
    CHECK(split->query.size() == static_cast<std::size_t>(cfg.test_identities * cfg.query_per_id));
    CHECK(split->gallery.size() == static_cast<std::size_t>(cfg.test_identities * cfg.gallery_per_id));
    CHECK(split->identity_count == cfg.identities);
  }
  std::set<std::int32_t> source_ids, target_ids;
  for (const auto& r : src.train) source_ids.insert(*r.identity);
  for (const auto& r : tgt.train) target_ids.insert(*r.identity);
  for (auto id : target_ids) CHECK(!source_ids.contains(id));
  CHECK(tgt.train.front().domain == Domain::kTarget);

  cfg.seed = 12;
  CHECK(synth_generate(cfg).first != src);
}

TEST_CASE("split files round trip") {
  SynthConfig cfg;
  cfg.identities = 4;
  cfg.samples_per_id = 3;
  cfg.test_identities = 2;
  cfg.dim = 12;
  cfg.latent_dim = 2;
  const auto [src, tgt] = synth_generate(cfg);
  const auto stem = scratch_dir("split") / "src";
  save_split(src, stem);
  CHECK(std::filesystem::exists(split_part_path(stem, "train")));
  CHECK(load_split(stem) == src);
}

TEST_CASE("split validation catches broken invariants") {
  SynthConfig cfg;
  cfg.identities = 4;
  cfg.samples_per_id = 3;
  cfg.test_identities = 2;
  cfg.dim = 12;
  cfg.latent_dim = 2;
  auto [src, tgt] = synth_generate(cfg);
  auto broken = src;
  broken.identity_count += 1;
  CHECK_THROWS_AS(validate_split(broken), DataError);
  broken = src;
  broken.query.front().identity = 9999;
  CHECK_THROWS_AS(validate_split(broken), DataError);
  broken = src;
  broken.train.front().identity.reset();
  CHECK_THROWS_AS(validate_split(broken), DataError);
  cfg.latent_dim = 5;
  CHECK_THROWS_AS(synth_generate(cfg), ConfigError);
}
