#include <doctest.h>

#include "gradient_fixtures.hpp"
#include "reid/fusion.hpp"

using namespace reid;
using namespace reid::testing;

TEST_CASE("smp layer schedule") {
  CHECK(smp_layer_sizes(64, 4, 5) == std::vector<Index>{64, 16, 4, 16, 64, 64});
  CHECK(smp_layer_sizes(16, 4, 3) == std::vector<Index>{16, 4, 16, 16});
  CHECK(smp_layer_sizes(2, 4, 3) == std::vector<Index>{2, 1, 2, 2});
  CHECK(smp_layer_sizes(8, 2, 1) == std::vector<Index>{8, 8});
  CHECK_THROWS_AS(smp_layer_sizes(8, 2, 4), ShapeError);
  CHECK_THROWS_AS(smp_layer_sizes(8, 0, 3), ShapeError);
}

TEST_CASE("split_map gives the extra row to the top half") {
  Pcg32 rng(1);
  const FeatureMap<double> map = random_map(3, 5, 2, rng);
  const auto [top, bottom] = split_map(map);
  CHECK(top.height() == 3);
  CHECK(bottom.height() == 2);
  CHECK(stack_rows(top, bottom) == map);
  CHECK(top(1, 2, 1) == map(1, 2, 1));
  CHECK(bottom(2, 0, 0) == map(2, 3, 0));
  CHECK_THROWS_AS(split_map(random_map(3, 1, 2, rng)), ShapeError);
}

TEST_CASE("ecab on a constant map") {
  // Zero SMP weights give logits 0, a mask of 1/2 and output (max + avg) / 2.
  const auto p = SmpParams<double>::Zero(4, 2, 3);
  const auto map = FeatureMap<double>::Constant(4, 2, 2, 3.0);
  const Eigen::VectorXd out = ecab(p, map);
  for (Index c = 0; c < 4; ++c) CHECK(out[c] == doctest::Approx(3.0));
  const Eigen::VectorXd mask = secab(p, map);
  for (Index c = 0; c < 4; ++c) CHECK(mask[c] == 0.5);
}

TEST_CASE("fusion without secab matches the manual product") {
  Pcg32 rng(2);
  const Index c = 6;
  FusionParams<double> fp{random_smp(c, 2, 3, rng), random_smp(c, 2, 3, rng), random_smp(c, 2, 3, rng),
                          BatchNormParams<double>::Identity(c), BatchNormParams<double>::Identity(c)};
  const auto top = random_map(c, 2, 2, rng);
  const auto bottom = random_map(c, 2, 2, rng);
  const auto tau = random_map(c, 4, 2, rng);
  const auto out = ensemble_fusion(fp, top, bottom, tau, FusionOptions{false});
  const Eigen::VectorXd expect = ecab(fp.ecab_top, top).cwiseProduct(global_average_pool(tau));
  const Eigen::VectorXd theta = (expect.array() / std::sqrt(1.0 + kBatchNormEpsilon)).matrix();
  CHECK((out.theta_top - theta).norm() < 1e-12);
  CHECK_THROWS_AS(ensemble_fusion(fp, random_map(c + 1, 2, 2, rng), bottom, tau), ShapeError);
}

TEST_CASE("bmfn") {
  Eigen::VectorXd a(2), b(2);
  a << 3, 0;
  b << 3, 8;
  const Eigen::VectorXd f = bmfn<double>(a, b);
  CHECK(f[0] == doctest::Approx(0.6));
  CHECK(f[1] == doctest::Approx(0.8));
  CHECK_THROWS_AS(bmfn<double>(a, Eigen::VectorXd(-a)), DegenerateInputError);
  CHECK_THROWS_AS(bmfn<double>(a, Eigen::VectorXd::Zero(3)), ShapeError);
}

TEST_CASE("inference feature is symmetric in the two views") {
  Pcg32 rng(3);
  const auto m = random_map(4, 4, 2, rng);
  const auto f = random_map(4, 4, 2, rng);
  const Eigen::VectorXd x = inference_feature(m, f);
  CHECK(x.size() == 12);
  CHECK(x.norm() == doctest::Approx(1.0));
  CHECK((x - inference_feature(f, m)).norm() < 1e-15);
}

TEST_CASE("fusion gradients match finite differences") {
  for (const auto& suite : gradient_suites()) {
    if (suite.name.find("ecab") == std::string::npos && suite.name.find("smp") == std::string::npos &&
        suite.name.find("fusion") == std::string::npos) {
      continue;
    }
    CAPTURE(suite.name);
    const auto outcome = run_gradient_suite(suite, 5, 17);
    CHECK(outcome.accepted == 5);
    CHECK(outcome.worst <= kFdTolerance);
  }
}
