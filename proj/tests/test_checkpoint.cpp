#include <doctest.h>

#include <filesystem>

#include "gradient_fixtures.hpp"
#include "reid/checkpoint.hpp"

using namespace reid;
using namespace reid::testing;

TEST_CASE("checkpoint bytes round trip") {
  Pcg32 rng(1);
  const DeskBackbone model = random_backbone(2, rng);
  Checkpoint ckpt = checkpoint_from_model(model);
  ckpt.metadata["stage"] = "test";
  const std::string bytes = serialize_checkpoint(ckpt);
  CHECK(bytes.rfind("CKPT1\n", 0) == 0);
  const Checkpoint back = parse_checkpoint(bytes);
  CHECK(back == ckpt);
  CHECK(serialize_checkpoint(back) == bytes);
  const DeskBackbone rebuilt = model_from_checkpoint(back);
  CHECK(rebuilt.config() == model.config());
  CHECK(rebuilt.params() == model.params());

  const auto path = std::filesystem::temp_directory_path() / "reid_uda_tests" / "model.ckpt";
  std::filesystem::create_directories(path.parent_path());
  save_checkpoint(ckpt, path);
  CHECK(load_checkpoint(path) == ckpt);
}

TEST_CASE("corrupt checkpoints are rejected") {
  Pcg32 rng(2);
  const std::string bytes = serialize_checkpoint(checkpoint_from_model(random_backbone(1, rng)));
  CHECK_THROWS_AS(parse_checkpoint("CKPT2\n" + bytes.substr(6)), FormatError);
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  CHECK_THROWS_AS(parse_checkpoint(bytes + "x"), FormatError);
}

TEST_CASE("prefixed stores") {
  Pcg32 rng(3);
  const DeskBackbone a = random_backbone(1, rng);
  const DeskBackbone b = random_backbone(1, rng);
  Checkpoint ckpt;
  insert_prefixed(ckpt.params, a.params(), "student.");
  insert_prefixed(ckpt.params, b.params(), "teacher.");
  ckpt.metadata["backbone"] = backbone_to_json(b.config());
  CHECK(extract_prefixed(ckpt.params, "student.") == a.params());
  CHECK(model_from_checkpoint(ckpt, "teacher.").params() == b.params());
  CHECK(backbone_from_json(backbone_to_json(a.config())) == a.config());
}
