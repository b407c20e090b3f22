#include <doctest.h>

#include "gradient_fixtures.hpp"
#include "reid/losses.hpp"

using namespace reid;
using namespace reid::testing;

TEST_CASE("id loss of uniform logits is log M") {
  ClassifierHead<double> head{Eigen::MatrixXd::Zero(4, 3), Eigen::VectorXd::Zero(4)};
  Batch<double> batch{Eigen::MatrixXd::Ones(3, 2), {0, 3}};
  CHECK(id_loss(head, batch).loss == doctest::Approx(std::log(4.0)));
  batch.labels[1] = 4;
  CHECK_THROWS_AS(id_loss(head, batch), LabelError);
}

TEST_CASE("hard triplet on a worked example") {
  // 1-D features: identity 0 at {0, 1}, identity 1 at {3, 5}.
  Batch<double> batch{Eigen::RowVectorXd::LinSpaced(4, 0, 3), {0, 0, 1, 1}};
  batch.features(0, 3) = 5;
  batch.features(0, 2) = 3;
  batch.features(0, 1) = 1;
  // anchor 0: d+ 1, d- 3; anchor 1: d+ 1, d- 2; anchor 2: d+ 2, d- 2; anchor 3: d+ 2, d- 4.
  const auto r = hard_triplet_loss(batch, 0.3);
  CHECK(r.loss == doctest::Approx((0.0 + 0.0 + 0.3 + 0.0) / 4.0));
  const auto s = softmax_triplet_loss(batch);
  const double expect = (std::log1p(std::exp(-2.0)) + std::log1p(std::exp(-1.0)) + std::log(2.0) +
                         std::log1p(std::exp(-2.0))) / 4.0;
  CHECK(s.loss == doctest::Approx(expect));
}

TEST_CASE("triplet batch structure") {
  Batch<double> batch{Eigen::MatrixXd::Zero(2, 3), {0, 0, 1}};
  CHECK_THROWS_AS(hard_triplet_loss(batch, 0.3), BatchStructureError);
  batch.labels = {0, 0, 0};
  CHECK_THROWS_AS(softmax_triplet_loss(batch), BatchStructureError);
}

TEST_CASE("weighted totals") {
  LossConfig cfg;
  CHECK(source_total(1.0, 2.0, cfg.kappa) == 3.0);
  CHECK(target_total(1.0, 2.0, 4.0, 6.0, cfg) == 8.0);
  cfg.margin = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("loss gradients match finite differences") {
  for (const auto& suite : gradient_suites()) {
    if (suite.name.find("loss") == std::string::npos) continue;
    CAPTURE(suite.name);
    const auto outcome = run_gradient_suite(suite, 5, 23);
    CHECK(outcome.accepted == 5);
    CHECK(outcome.worst <= kFdTolerance);
  }
}
