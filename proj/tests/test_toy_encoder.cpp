#include <filesystem>

#include "anyup/feature_io.hpp"
#include "anyup/rng.hpp"
#include "anyup/toy_encoder.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace anyup;

using testing::kind_of;
using testing::random_image;

TEST_CASE("encode output shape") {
  EncoderConfig cfg;
  cfg.feature_dim = 16;
  const FeatureMap f = encode(random_image(32, 32, 1), cfg);
  CHECK(f.height == 4);
  CHECK(f.width == 4);
  CHECK(f.channels == 16);
  const FeatureMap g = encode(random_image(24, 40, 2), EncoderConfig{});
  CHECK(g.height == 3);
  CHECK(g.width == 5);
  CHECK(g.channels == 32);
}

TEST_CASE("encode is deterministic and seed dependent") {
  const GuidanceImage img = random_image(16, 16, 3);
  EncoderConfig a;
  CHECK(encode(img, a).data == encode(img, a).data);
  EncoderConfig b = a;
  b.seed = 99;
  CHECK(encode(img, a).data != encode(img, b).data);
}

TEST_CASE("encode is patch local") {
  GuidanceImage a = random_image(24, 24, 4);
  GuidanceImage b = random_image(24, 24, 5);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) b.at(y, x, c) = a.at(y, x, c);
  const FeatureMap fa = encode(a, EncoderConfig{}), fb = encode(b, EncoderConfig{});
  for (int c = 0; c < 32; ++c) CHECK(fa.at(0, 0, c) == fb.at(0, 0, c));

  // mutate one pixel of patch (1, 2): every other cell is bit-unchanged
  GuidanceImage m = a;
  m.at(13, 17, 1) = 1.0f - m.at(13, 17, 1);
  const FeatureMap fm = encode(m, EncoderConfig{});
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      const bool touched = y == 1 && x == 2;
      bool same = true;
      for (int c = 0; c < 32; ++c) same = same && fm.at(y, x, c) == fa.at(y, x, c);
      CHECK(same != touched);
    }
}

TEST_CASE("features are bounded by tanh") {
  const FeatureMap f = encode(random_image(32, 32, 6), EncoderConfig{});
  for (float v : f.data) {
    CHECK(v > -1.0f);
    CHECK(v < 1.0f);
  }
}

TEST_CASE("encode_dense at stride P equals encode") {
  const GuidanceImage img = random_image(32, 48, 7);
  const EncoderConfig cfg;
  CHECK(encode_dense(img, cfg, 8).data == encode(img, cfg).data);
}

TEST_CASE("encode_dense of a constant image is constant") {
  const FeatureMap f = encode_dense(GuidanceImage(20, 20, 0.3f), EncoderConfig{}, 2);
  CHECK(f.height == 7);
  for (std::size_t i = 1; i < f.pixels(); ++i)
    for (int c = 0; c < f.channels; ++c) CHECK(f.data[i * f.channels + c] == f.data[c]);
}

TEST_CASE("encode_dense 16x16 stride 4 centre cell equals the centred crop") {
  const GuidanceImage img = random_image(16, 16, 8);
  const EncoderConfig cfg;
  const FeatureMap d = encode_dense(img, cfg, 4);
  CHECK(d.height == 3);
  CHECK(d.width == 3);
  const GuidanceImage crop(slice(img, 4, 4, 8, 8));
  const FeatureMap e = encode(crop, cfg);
  for (int c = 0; c < 32; ++c) CHECK(d.at(1, 1, c) == doctest::Approx(e.at(0, 0, c)).epsilon(1e-6));
}

TEST_CASE("crop commutation at stride 1") {
  const GuidanceImage img = random_image(24, 24, 9);
  const EncoderConfig cfg;
  const FeatureMap whole = encode_dense(img, cfg, 2);
  const GuidanceImage crop(slice(img, 6, 4, 14, 16));
  const FeatureMap part = encode_dense(crop, cfg, 2);
  for (int y = 0; y < part.height; ++y)
    for (int x = 0; x < part.width; ++x)
      for (int c = 0; c < 32; ++c) CHECK(part.at(y, x, c) == doctest::Approx(whole.at(y + 3, x + 2, c)).epsilon(1e-6));
}

TEST_CASE("encoder precondition errors") {
  CHECK(kind_of([] { encode(GuidanceImage(12, 16), EncoderConfig{}); }) == ErrorKind::Shape);
  CHECK(kind_of([] { encode_dense(GuidanceImage(16, 16), EncoderConfig{}, 3); }) == ErrorKind::Shape);
  EncoderConfig bad;
  bad.patch_size = 0;
  CHECK(kind_of([&] { ToyEncoder e(bad); }) == ErrorKind::Validation);
}

TEST_CASE("import_external_features accepts any channel count") {
  const auto dir = std::filesystem::temp_directory_path() / "anyup_test_encoder";
  std::filesystem::create_directories(dir);
  for (int c : {384, 768}) {
    FeatureMap m(c == 384 ? 16 : 28, c == 384 ? 16 : 28, c, 0.25f);
    write_feature_map(m, dir / "ext.anyt");
    CHECK(import_external_features(dir / "ext.anyt").channels == c);
  }
  auto bytes = encode_anyt(FeatureMap(1, 1, 1));
  bytes[15] = 0;
  bytes.resize(kAnytHeaderBytes);
  CHECK(kind_of([&] { decode_anyt(bytes); }) == ErrorKind::Validation);
}
