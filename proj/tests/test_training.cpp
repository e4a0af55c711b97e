#include <algorithm>
#include <fstream>
#include <iterator>

#include "anyup/feature_io.hpp"
#include "anyup/training.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace anyup;

using testing::kind_of;
using testing::random_features;
using testing::random_image;
using testing::temp_dir;

namespace {

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.image_size = 32;
  cfg.crop_size = 16;
  cfg.batch_size = 2;
  cfg.crops_per_image = 2;
  cfg.total_steps = 6;
  cfg.learning_rate = 1e-3;
  cfg.encoder.patch_size = 4;
  cfg.encoder.feature_dim = 8;
  cfg.encoder.hidden_dim = 16;
  return cfg;
}

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool same_params(const ParamSet& a, const ParamSet& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].values != b[i].values) return false;
  return true;
}

// 2x2 grid of flat colour blocks.
GuidanceImage block_image(int size) {
  const float colours[4][3] = {{0.9f, 0.1f, 0.1f}, {0.1f, 0.8f, 0.2f}, {0.2f, 0.2f, 0.9f}, {0.9f, 0.9f, 0.1f}};
  GuidanceImage img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = colours[2 * (2 * y / size) + 2 * x / size][c];
  return img;
}

}  // namespace

TEST_CASE("crop offsets are uniform over aligned positions") {
  Rng rng(1);
  int counts[5][5] = {};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const CropSpec c = sample_crop(64, 32, 8, rng);
    REQUIRE(c.size == 32);
    REQUIRE(c.offset_y % 8 == 0);
    REQUIRE(c.offset_x % 8 == 0);
    REQUIRE(c.offset_y + 32 <= 64);
    REQUIRE(c.offset_x + 32 <= 64);
    ++counts[c.offset_y / 8][c.offset_x / 8];
  }
  double chi2 = 0;
  const double expected = n / 25.0;
  for (auto& row : counts)
    for (int k : row) chi2 += (k - expected) * (k - expected) / expected;
  CHECK(chi2 < 51.18);  // 24 degrees of freedom, p = 0.001
}

TEST_CASE("crop sampling boundaries and errors") {
  Rng rng(2);
  CHECK(sample_crop(32, 32, 8, rng) == CropSpec{0, 0, 32});
  CHECK(kind_of([&] { sample_crop(32, 40, 8, rng); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { sample_crop(32, 12, 8, rng); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { sample_crop(32, 16, 0, rng); }) == ErrorKind::Validation);
}

TEST_CASE("training example shapes and targets") {
  EncoderConfig enc;
  const ToyEncoder encoder(enc);
  const GuidanceImage img = random_image(64, 64, 3);
  const CropSpec crops[] = {{8, 16, 32}, {32, 0, 32}};
  const TrainingExample ex = build_training_example(img, encoder, crops);
  CHECK(ex.features.height == 4);
  CHECK(ex.features.channels == 32);
  CHECK(ex.grid_height() == 8);
  CHECK(ex.features.data == encoder.encode(resize_bilinear(img, 32, 32)).data);
  REQUIRE(ex.crops.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const CropSpec& c = crops[i];
    CHECK(ex.crops[i].image.data == GuidanceImage(slice(img, c.offset_y, c.offset_x, c.size, c.size)).data);
    CHECK(ex.crops[i].target.data == encoder.encode(ex.crops[i].image).data);
    CHECK(ex.crops[i].target.height == 4);
  }
  const CropSpec mixed[] = {{0, 0, 32}, {0, 0, 16}};
  CHECK(kind_of([&] { build_training_example(img, encoder, mixed); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { build_training_example(img, encoder, CropSpec{4, 0, 32}); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { build_training_example(img, encoder, CropSpec{40, 0, 32}); }) == ErrorKind::Validation);
}

TEST_CASE("crop feature extraction") {
  const FeatureMap q = random_features(8, 8, 3, 4);
  const FeatureMap s = extract_crop_features(q, CropSpec{16, 24, 32}, 8);
  REQUIRE(s.height == 4);
  REQUIRE(s.width == 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) CHECK(s.at(y, x, c) == q.at(y + 2, x + 3, c));
  CHECK(extract_crop_features(q, CropSpec{0, 0, 64}, 8).data == q.data);
  CHECK(extract_crop_features(q, CropSpec{16, 24, 32}, 4, 2).data == s.data);
  CHECK(kind_of([&] { extract_crop_features(q, CropSpec{4, 0, 32}, 8); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { extract_crop_features(q, CropSpec{40, 0, 32}, 8); }) == ErrorKind::Validation);
}

TEST_CASE("a zero learning rate leaves the weights unchanged") {
  TrainConfig cfg = small_config();
  cfg.learning_rate = 0.0;
  cfg.total_steps = 2;
  const auto data = synthetic_dataset(2, 32, 5);
  const TrainResult r = train(cfg, data);
  CHECK(same_params(r.checkpoint.weights.params, UpsamplerWeights::initialize(cfg.upsampler).params));
  CHECK(r.log.size() == 2);
}

TEST_CASE("training is deterministic") {
  const TrainConfig cfg = small_config();
  const auto data = synthetic_dataset(3, 32, 6);
  const TrainResult a = train(cfg, data), b = train(cfg, data);
  CHECK(same_params(a.checkpoint.weights.params, b.checkpoint.weights.params));
  CHECK(same_params(a.checkpoint.optimizer.m, b.checkpoint.optimizer.m));
  REQUIRE(a.log.size() == 6);
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss.total == b.log[i].loss.total);
  TrainConfig other = cfg;
  other.seed = 1;
  CHECK(train(other, data).log[0].loss.total != a.log[0].loss.total);
}

TEST_CASE("a single step and a resumed run") {
  TrainConfig cfg = small_config();
  cfg.total_steps = 1;
  const auto data = synthetic_dataset(2, 32, 7);
  const TrainResult one = train(cfg, data);
  CHECK(one.log.size() == 1);
  CHECK(one.checkpoint.step == 1);
  CHECK(!same_params(one.checkpoint.weights.params, UpsamplerWeights::initialize(cfg.upsampler).params));

  cfg.total_steps = 6;
  cfg.checkpoint_interval = 3;
  const auto dir = temp_dir("resume");
  TrainOptions opts;
  opts.out_dir = dir / "full";
  const TrainResult full = train(cfg, data, opts);
  CHECK(std::filesystem::exists(dir / "full" / "step_000003" / "manifest.json"));
  CHECK(std::filesystem::exists(dir / "full" / "train_log.csv"));

  TrainOptions resume;
  resume.resume_from = dir / "full" / "step_000003";
  const TrainResult tail = train(cfg, data, resume);
  REQUIRE(tail.log.size() == 3);
  CHECK(tail.log.front().step == 4);
  for (std::size_t i = 0; i < 3; ++i) CHECK(tail.log[i].loss.total == full.log[i + 3].loss.total);
  CHECK(same_params(tail.checkpoint.weights.params, full.checkpoint.weights.params));
  CHECK(same_params(tail.checkpoint.optimizer.m, full.checkpoint.optimizer.m));
  CHECK(same_params(tail.checkpoint.optimizer.v, full.checkpoint.optimizer.v));
}

TEST_CASE("dataset errors") {
  const TrainConfig cfg = small_config();
  CHECK(kind_of([&] { train(cfg, std::vector<GuidanceImage>{}); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { train(cfg, synthetic_dataset(1, 16, 0)); }) == ErrorKind::Validation);

  const auto dir = temp_dir("dataset");
  save_png(synthetic_image(40, 1), dir / "good.png");
  std::ofstream(dir / "bad.png") << "not a png";
  const std::vector<std::filesystem::path> paths = {dir / "good.png", dir / "bad.png", dir / "missing.png"};
  std::vector<std::string> warnings;
  const auto images = load_dataset(paths, 32, [&](const std::string& w) { warnings.push_back(w); });
  CHECK(images.size() == 1);
  CHECK(images[0].height == 32);
  CHECK(warnings.size() == 2);
  const std::vector<std::filesystem::path> none = {dir / "bad.png"};
  CHECK(kind_of([&] { load_dataset(none, 32); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { load_dataset({}, 32); }) == ErrorKind::Validation);
}

TEST_CASE("checkpoint round trip") {
  TrainConfig cfg = small_config();
  cfg.total_steps = 2;
  const TrainResult r = train(cfg, synthetic_dataset(2, 32, 8));
  const auto dir = temp_dir("checkpoint");
  save_checkpoint(r.checkpoint, dir / "a");
  const Checkpoint loaded = load_checkpoint(dir / "a");
  CHECK(loaded.step == 2);
  CHECK(loaded.optimizer.step == 2);
  CHECK(loaded.train_config.has_value());
  CHECK(same_params(loaded.weights.params, r.checkpoint.weights.params));
  CHECK(same_params(loaded.optimizer.v, r.checkpoint.optimizer.v));
  save_checkpoint(loaded, dir / "b");
  for (const auto& entry : std::filesystem::directory_iterator(dir / "a"))
    REQUIRE(file_bytes(entry.path()) == file_bytes(dir / "b" / entry.path().filename()));

  const GuidanceImage img = random_image(32, 32, 9);
  const FeatureMap p = random_features(4, 4, 8, 10);
  CHECK(upsample(loaded.weights, img, p).data == upsample(r.checkpoint.weights, img, p).data);

  const auto tensor = dir / "b" / "key.proj.weight.anyt";
  auto bytes = file_bytes(tensor);
  bytes.resize(bytes.size() - 7);
  std::ofstream(tensor, std::ios::binary | std::ios::trunc).write(reinterpret_cast<const char*>(bytes.data()),
                                                                   std::streamsize(bytes.size()));
  CHECK(kind_of([&] { load_checkpoint(dir / "b"); }) == ErrorKind::Io);

  std::ifstream in(dir / "a" / "manifest.json");
  std::string manifest((std::istreambuf_iterator<char>(in)), {});
  const auto pos = manifest.find("\"format_version\": 1");
  REQUIRE(pos != std::string::npos);
  manifest.replace(pos, 19, "\"format_version\": 2");
  std::ofstream(dir / "a" / "manifest.json", std::ios::trunc) << manifest;
  CHECK(kind_of([&] { load_checkpoint(dir / "a"); }) == ErrorKind::Unsupported);
  CHECK(kind_of([&] { load_checkpoint(dir / "missing"); }) == ErrorKind::Io);
}

TEST_CASE("a non-finite input aborts the step without touching the weights") {
  const TrainConfig cfg = small_config();
  const ToyEncoder encoder(cfg.encoder);
  GuidanceImage img = synthetic_image(32, 11);
  TrainingExample ex = build_training_example(img, encoder, CropSpec{0, 0, 16});
  ex.image.at(3, 3, 1) = std::nanf("");
  UpsamplerWeights w = UpsamplerWeights::initialize(cfg.upsampler);
  const UpsamplerWeights before = w;
  OptimizerState state = OptimizerState::zeros_like(w.params);
  const std::uint64_t seeds[] = {1};
  CHECK(kind_of([&] { train_step(w, std::span(&ex, 1), seeds, state, StepOptions{}); }) == ErrorKind::Numerical);
  CHECK(same_params(w.params, before.params));
  CHECK(state.step == 0);
}

TEST_CASE("a single example can be overfit") {
  TrainConfig cfg = small_config();
  cfg.batch_size = 1;
  cfg.crops_per_image = 4;
  cfg.total_steps = 500;
  cfg.learning_rate = 3e-3;
  const std::vector<GuidanceImage> data = {block_image(32)};
  const TrainResult r = train(cfg, data);
  std::vector<double> windows;
  for (std::size_t i = 0; i < r.log.size(); i += 50) {
    double s = 0;
    for (std::size_t j = i; j < i + 50; ++j) s += r.log[j].loss.main;
    windows.push_back(s / 50);
  }
  for (std::size_t i = 1; i < windows.size(); ++i) {
    INFO("window " << i << ": " << windows[i - 1] << " -> " << windows[i]);
    // once the fit is exact the windows only hold rounding noise
    CHECK(windows[i] <= windows[i - 1] + 1e-12);
  }
  INFO("first " << r.log.front().loss.main << " last window " << windows.back());
  CHECK(windows.back() < 0.1 * r.log.front().loss.main);
}

TEST_CASE("source transforms are square symmetries with channel reordering") {
  const GuidanceImage img = random_image(6, 4, 12);
  CHECK(transform_source(img, 0, 0).data == img.data);
  for (int s : {1, 2, 3})
    CHECK(transform_source(transform_source(img, s, 0), s, 0).data == img.data);
  for (int o : {1, 2, 5})
    CHECK(transform_source(transform_source(img, 0, o), 0, o).data == img.data);
  const GuidanceImage t = transform_source(img, 4, 0);
  CHECK(t.height == 4);
  CHECK(t.width == 6);
  CHECK(t.at(1, 3, 2) == img.at(3, 1, 2));
  const GuidanceImage f = transform_source(img, 1, 3);
  CHECK(f.at(2, 0, 0) == img.at(2, 3, 1));
  CHECK(f.at(2, 0, 1) == img.at(2, 3, 2));
  CHECK(f.at(2, 0, 2) == img.at(2, 3, 0));
  std::vector<std::vector<float>> seen;
  for (int s = 0; s < 8; ++s) seen.push_back(transform_source(random_image(5, 5, 13), s, 0).data);
  for (int a = 0; a < 8; ++a)
    for (int b = a + 1; b < 8; ++b) CHECK(seen[a] != seen[b]);
  CHECK(kind_of([&] { transform_source(img, 8, 0); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { transform_source(img, 0, 6); }) == ErrorKind::Validation);
}
