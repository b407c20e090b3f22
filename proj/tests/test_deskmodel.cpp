#include <doctest.h>

#include "gradient_fixtures.hpp"
#include "reid/deskmodel.hpp"

using namespace reid;
using namespace reid::testing;

TEST_CASE("layout of a depth-2 backbone") {
  const BackboneConfig cfg = small_backbone(2);
  const auto layout = DeskBackbone::layout(cfg);
  std::map<std::string, std::pair<Index, Index>> shapes(layout.begin(), layout.end());
  CHECK(shapes.at("encoder.0.weight") == std::pair<Index, Index>{8, 6});
  CHECK(shapes.at("encoder.1.weight") == std::pair<Index, Index>{24, 8});
  CHECK(shapes.at("head.weight") == std::pair<Index, Index>{5, 4});
  CHECK(shapes.contains("fusion.secab.layer0.weight"));
  CHECK(shapes.contains("fusion.bn_bottom.running_var"));
  Pcg32 rng(1);
  DeskBackbone model = DeskBackbone::initialize(cfg, rng);
  CHECK(model.params().size() == layout.size());
  ParameterStore broken = model.params();
  broken.set("encoder.0.weight", Eigen::MatrixXd::Zero(8, 5));
  CHECK_THROWS_AS(DeskBackbone(cfg, broken), CongruenceError);
}

TEST_CASE("backbone config validation") {
  BackboneConfig cfg;
  cfg.height = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.depth = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.smp_layers = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("single and batched forward agree") {
  Pcg32 rng(2);
  const DeskBackbone model = random_backbone(2, rng);
  const Eigen::MatrixXd x = normal_matrix(6, 3, rng);
  const Activations acts = model.forward_batch(x);
  const PooledBatch pooled = model.pool(acts);
  for (Index i = 0; i < 3; ++i) {
    const auto out = model.forward(x.col(i));
    CHECK((out.global - pooled.global.col(i)).norm() < 1e-12);
    CHECK((out.top - pooled.top.col(i)).norm() < 1e-12);
    CHECK((out.bottom - pooled.bottom.col(i)).norm() < 1e-12);
    CHECK(out.map == model.map_at(acts, i));
  }
  CHECK(flip_input(x.col(0)) == x.col(0).reverse());
}

TEST_CASE("stale activations are refused") {
  Pcg32 rng(3);
  DeskBackbone model = random_backbone(1, rng);
  const Eigen::MatrixXd x = normal_matrix(6, 2, rng);
  const Activations acts = model.forward_batch(x);
  model.params().mutable_entry("encoder.0.bias")(0, 0) += 1;
  CHECK_THROWS_AS(model.backward_maps(acts, Eigen::MatrixXd::Zero(24, 2)), StateError);
}

TEST_CASE("head and fusion round trip through the store") {
  Pcg32 rng(4);
  DeskBackbone model = random_backbone(1, rng);
  ClassifierHead<double> head{normal_matrix(9, 4, rng), normal_matrix(9, 1, rng)};
  model.set_head(head);
  CHECK(model.config().classes == 9);
  CHECK(model.head().weight == head.weight);
  FusionParams<double> fp = model.fusion();
  fp.bn_top.running_mean.setConstant(0.25);
  model.set_fusion(fp);
  CHECK(model.params().at("fusion.bn_top.running_mean")(2, 0) == 0.25);
}

TEST_CASE("adam first step and buffers") {
  ParameterStore p;
  p.set("w", Eigen::MatrixXd::Constant(1, 2, 2.0));
  p.set("fusion.bn_top.running_mean", Eigen::MatrixXd::Ones(1, 1));
  ParameterStore g = p.zeros_like();
  g.mutable_entry("w") << 0.5, -3.0;
  g.mutable_entry("fusion.bn_top.running_mean")(0, 0) = 7;
  OptimizerState opt = OptimizerState::for_params(p, 0.1, 0.01);
  adam_step(p, g, opt);
  // First bias-corrected step moves by lr * sign(g) plus decoupled decay.
  CHECK(p.at("w")(0, 0) == doctest::Approx(2.0 - 0.1 * (0.5 / (0.5 + 1e-8)) - 0.1 * 0.01 * 2.0).epsilon(1e-12));
  CHECK(p.at("w")(0, 1) == doctest::Approx(2.0 + 0.1 * (3.0 / (3.0 + 1e-8)) - 0.1 * 0.01 * 2.0).epsilon(1e-12));
  CHECK(p.at("fusion.bn_top.running_mean")(0, 0) == 1.0);
  CHECK(opt.step == 1);
}

TEST_CASE("backbone gradients match finite differences") {
  for (const auto& suite : gradient_suites()) {
    if (suite.name.rfind("backbone", 0) != 0) continue;
    CAPTURE(suite.name);
    const auto outcome = run_gradient_suite(suite, 5, 29);
    CHECK(outcome.accepted == 5);
    CHECK(outcome.worst <= kFdTolerance);
  }
}
