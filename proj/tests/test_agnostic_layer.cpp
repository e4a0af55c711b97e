#include <algorithm>
#include <numeric>

#include "anyup/agnostic_layer.hpp"
#include "anyup/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace anyup;

namespace {

Grid random_grid(int h, int w, int c, Rng& rng, double scale = 1.0) {
  Grid g(h, w, c);
  for (double& v : g.data) v = rng.uniform(-scale, scale);
  return g;
}

std::vector<double> random_filters(int m, int k, Rng& rng) {
  std::vector<double> f(std::size_t(m) * k * k);
  for (double& v : f) v = rng.uniform(-1.0, 1.0);
  return f;
}

Grid permute_channels(const Grid& g, const std::vector<int>& perm) {
  Grid out(g.height, g.width, g.channels);
  for (std::size_t i = 0; i < g.pixels(); ++i)
    for (int c = 0; c < g.channels; ++c) out.data[i * g.channels + c] = g.data[i * g.channels + perm[c]];
  return out;
}

}  // namespace

TEST_CASE("M = 1 gives all ones") {
  Rng rng(1);
  const Grid p = random_grid(4, 5, 3, rng);
  const Grid out = agnostic_conv(p, std::vector<double>(9, 0.7), 1, 3);
  for (double v : out.data) CHECK(v == 1.0);
}

TEST_CASE("hand-built 3x3 instance matches the oracle") {
  Grid p(3, 3, 1, std::vector<double>{0, 1, 0, 1, 2, 1, 0, 1, 0});
  std::vector<double> filters(18, 0.0);
  filters[4] = 1.0;                                             // centre one
  std::fill(filters.begin() + 9, filters.end(), 1.0 / 9.0);     // box mean
  const Grid got = agnostic_conv(p, filters, 2, 3);
  const Grid want = oracle::agnostic_conv(p, filters, 2, 3);
  CHECK(oracle::max_abs_diff(got.data, want.data) < 1e-12);
  // centre: responses (2, 6/9) -> softmax
  const double e0 = std::exp(2.0), e1 = std::exp(6.0 / 9.0);
  CHECK(got.at(1, 1, 0) == doctest::Approx(e0 / (e0 + e1)));
}

TEST_CASE("matches the straight-loop oracle on random instances") {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const int h = 1 + int(rng.below(8)), w = 1 + int(rng.below(8)), n = 1 + int(rng.below(5));
    const int m = 1 + int(rng.below(4)), k = 1 + 2 * int(rng.below(3));
    const Grid p = random_grid(h, w, n, rng, 2.0);
    const auto filters = random_filters(m, k, rng);
    REQUIRE(oracle::max_abs_diff(agnostic_conv(p, filters, m, k).data, oracle::agnostic_conv(p, filters, m, k).data) <
            1e-6);
  }
}

TEST_CASE("output is a distribution at every location") {
  Rng rng(3);
  const Grid p = random_grid(6, 7, 5, rng, 3.0);
  const Grid out = agnostic_conv(p, random_filters(8, 3, rng), 8, 3);
  for (std::size_t i = 0; i < out.pixels(); ++i) {
    double s = 0;
    for (int j = 0; j < 8; ++j) {
      const double v = out.data[i * 8 + j];
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("shape does not depend on the channel count") {
  Rng rng(4);
  const KernelBasis basis = KernelBasis::random(6, 3, 7);
  for (int n : {1, 3, 32, 384, 768}) {
    FeatureMap p(3, 4, n);
    for (float& v : p.data) v = float(rng.uniform(-1, 1));
    const FeatureMap out = agnostic_conv(p, basis);
    CHECK(out.height == 3);
    CHECK(out.width == 4);
    CHECK(out.channels == 6);
  }
}

TEST_CASE("channel permutation and duplication invariance") {
  Rng rng(5);
  const Grid p = random_grid(5, 5, 7, rng);
  const auto filters = random_filters(4, 3, rng);
  const Grid base = agnostic_conv(p, filters, 4, 3);

  std::vector<int> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  for (int t = 0; t < 10; ++t) {
    for (int i = 6; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    CHECK(oracle::max_abs_diff(agnostic_conv(permute_channels(p, perm), filters, 4, 3).data, base.data) < 1e-6);
  }
  const Grid doubled = concat_channels(p, p);
  CHECK(oracle::max_abs_diff(agnostic_conv(doubled, filters, 4, 3).data, base.data) < 1e-6);
}

TEST_CASE("filter gradients match central differences") {
  Rng rng(6);
  for (int t = 0; t < 5; ++t) {
    const int m = 2 + int(rng.below(3)), k = t % 2 ? 3 : 1;
    const Grid p = random_grid(4, 5, 3, rng);
    auto filters = random_filters(m, k, rng);
    const Grid weights = random_grid(4, 5, m, rng);
    const auto loss = [&](const std::vector<double>& f) {
      const Grid o = agnostic_conv(p, f, m, k);
      double s = 0;
      for (std::size_t i = 0; i < o.size(); ++i) s += o.data[i] * weights.data[i];
      return s;
    };
    std::vector<double> grad(filters.size(), 0.0);
    agnostic_conv_backward(p, filters, m, k, weights, grad);
    std::vector<double> fd(filters.size());
    for (std::size_t i = 0; i < filters.size(); ++i) {
      auto a = filters, b = filters;
      a[i] += 1e-4;
      b[i] -= 1e-4;
      fd[i] = (loss(a) - loss(b)) / 2e-4;
    }
    double num = 0, den = 0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
      num += (grad[i] - fd[i]) * (grad[i] - fd[i]);
      den += fd[i] * fd[i];
    }
    CHECK(std::sqrt(num / den) < 1e-3);
  }
}

TEST_CASE("KernelBasis initialization and validation") {
  const KernelBasis b = KernelBasis::random(32, 3, 11);
  CHECK(b.filters.size() == 32u * 9u);
  for (double v : b.filters) {
    CHECK(v >= -1.0 / 3.0);
    CHECK(v <= 1.0 / 3.0);
  }
  CHECK(KernelBasis::random(32, 3, 11).filters == b.filters);
  CHECK_THROWS_AS(KernelBasis::random(2, 2, 0), Error);
  KernelBasis bad = b;
  bad.filters[3] = std::nan("");
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(agnostic_conv(Grid(0, 3, 2), b.filters, 32, 3), Error);
}
