#include <cmath>

#include "anyup/losses.hpp"
#include "anyup/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace anyup;

using testing::kind_of;
using testing::random_features;
using testing::random_image;

namespace {

FeatureMap vec(std::initializer_list<float> v) { return FeatureMap(1, 1, int(v.size()), std::vector<float>(v)); }

}  // namespace

TEST_CASE("cos_mse on unit vectors") {
  CHECK(cos_mse(vec({1, 0}), vec({1, 0})) == doctest::Approx(0.0));
  CHECK(cos_mse(vec({1, 0}), vec({0, 1})) == doctest::Approx(2.0));
  CHECK(cos_mse(vec({1, 0}), vec({-1, 0})) == doctest::Approx(4.0));
}

TEST_CASE("cos_mse is symmetric and non-negative") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const FeatureMap a = random_features(3, 4, 5, s), b = random_features(3, 4, 5, s + 100);
    CHECK(cos_mse(a, b) == doctest::Approx(cos_mse(b, a)).epsilon(1e-12));
    CHECK(cos_mse(a, b) >= 0.0);
    CHECK(cos_mse(a, a) == doctest::Approx(0.0));
  }
}

TEST_CASE("cos_mse of a scaled copy has only the squared error") {
  const FeatureMap a = random_features(4, 4, 6, 1);
  double mean_sq = 0;
  for (float v : a.data) mean_sq += double(v) * v;
  mean_sq /= double(a.size());
  for (float lambda : {0.5f, 2.0f, 3.0f}) {
    FeatureMap b = a;
    for (float& v : b.data) v *= lambda;
    CHECK(cos_mse(a, b) == doctest::Approx((lambda - 1.0) * (lambda - 1.0) * mean_sq).epsilon(1e-5));
  }
}

TEST_CASE("a zero-norm location has cosine distance one") {
  CHECK(cos_mse(vec({0, 0}), vec({1, 0})) == doctest::Approx(1.5));
  CHECK(cos_mse(vec({0, 0}), vec({0, 0})) == doctest::Approx(1.0));
  Grid ga, gb;
  cos_mse(to_grid(vec({0, 0})), to_grid(vec({0, 0})), &ga, &gb);
  for (double g : ga.data) CHECK(std::isfinite(g));
}

TEST_CASE("cos_mse gradients match central differences") {
  const Grid a = to_grid(random_features(3, 3, 4, 2)), b = to_grid(random_features(3, 3, 4, 3));
  Grid ga, gb;
  cos_mse(a, b, &ga, &gb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    Grid up = a, down = a;
    up.data[i] += 1e-6;
    down.data[i] -= 1e-6;
    CHECK(ga.data[i] == doctest::Approx((cos_mse(up, b) - cos_mse(down, b)) / 2e-6).epsilon(1e-5));
    Grid bu = b, bd = b;
    bu.data[i] += 1e-6;
    bd.data[i] -= 1e-6;
    CHECK(gb.data[i] == doctest::Approx((cos_mse(a, bu) - cos_mse(a, bd)) / 2e-6).epsilon(1e-5));
  }
  CHECK(kind_of([&] { cos_mse(a, Grid(3, 3, 5)); }) == ErrorKind::Shape);
}

TEST_CASE("input consistency examples") {
  const FeatureMap p = random_features(2, 3, 4, 4);
  FeatureMap q(8, 12, 4);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 12; ++x)
      for (int c = 0; c < 4; ++c) q.at(y, x, c) = p.at(y / 4, x / 4, c);
  CHECK(input_consistency(q, p) == doctest::Approx(0.0).epsilon(1e-12));

  const FeatureMap q2(2, 2, 1, std::vector<float>{1, 3, 5, 7});
  CHECK(input_consistency(q2, FeatureMap(1, 1, 1, 4.0f)) == doctest::Approx(0.0));
  CHECK(input_consistency(q2, FeatureMap(1, 1, 1, 5.0f)) == doctest::Approx(1.0));
}

TEST_CASE("input consistency gradient matches central differences") {
  const Grid q = to_grid(random_features(4, 6, 3, 5)), p = to_grid(random_features(2, 3, 3, 6));
  Grid g;
  input_consistency(q, p, &g);
  for (std::size_t i = 0; i < q.size(); ++i) {
    Grid up = q, down = q;
    up.data[i] += 1e-6;
    down.data[i] -= 1e-6;
    CHECK(g.data[i] == doctest::Approx((input_consistency(up, p) - input_consistency(down, p)) / 2e-6).epsilon(1e-5));
  }
}

TEST_CASE("augmentation is deterministic and stays in range") {
  const GuidanceImage img = random_image(16, 16, 7);
  CHECK(apply_augmentation(img, 3).data == apply_augmentation(img, 3).data);
  CHECK(apply_augmentation(img, 0, AugmentationParams::none()).data == img.data);
  bool any_changed = false;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const GuidanceImage a = apply_augmentation(img, s);
    for (float v : a.data) REQUIRE((v >= 0.0f && v <= 1.0f));
    any_changed = any_changed || a.data != img.data;
  }
  CHECK(any_changed);
}

TEST_CASE("self consistency") {
  const FeatureMap p = random_features(4, 4, 3, 8);
  const GuidanceImage img = random_image(16, 16, 9);
  const UpsampleFn ignores_image = [](const FeatureMap& f, const GuidanceImage&) { return f; };
  CHECK(self_consistency(ignores_image, p, img, 1) == 0.0);

  const UpsampleFn uses_image = [](const FeatureMap&, const GuidanceImage& g) {
    FeatureMap out(g.height, g.width, 3);
    out.data = g.data;
    return out;
  };
  CHECK(self_consistency(uses_image, p, img, 1, AugmentationParams::none()) == 0.0);
  AugmentationParams always;
  always.p_brightness = 1.0;
  always.brightness_min = 0.5;
  always.brightness_max = 0.6;
  CHECK(self_consistency(uses_image, p, img, 1, always) > 0.0);
}

TEST_CASE("total loss weighting") {
  CHECK(total_loss({2.0, 1.0, 4.0}, {1.0, 0.1, 0.1}) == doctest::Approx(2.5));
  CHECK(total_loss({2.0, 1.0, 4.0}, {1.0, 0.0, 0.0}) == doctest::Approx(2.0));
  CHECK(kind_of([] { total_loss({1, 1, 1}, {1.0, -0.1, 0.1}); }) == ErrorKind::Validation);
  CHECK(kind_of([] { total_loss({1, 1, 1}, {0.0, 0.0, 0.0}); }) == ErrorKind::Validation);
  CHECK(kind_of([] { total_loss({1, 1, 1}, {std::nan(""), 0.0, 0.0}); }) == ErrorKind::Validation);
}
