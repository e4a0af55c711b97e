#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "anyup/anyup.h"
#include "doctest.h"

namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("anyup_capi_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<float> ramp(std::size_t n) {
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = float(i % 17) / 17.0f - 0.4f;
  return v;
}

struct Counter {
  int rows = 0;
  int64_t last = 0;
};

void count_row(const anyup_train_row* row, void* user) {
  auto* c = static_cast<Counter*>(user);
  ++c->rows;
  c->last = row->step;
}

}  // namespace

TEST_CASE("version and status strings") {
  CHECK(std::strlen(anyup_version()) > 0);
  CHECK(std::string(anyup_status_string(ANYUP_OK)) == "ok");
  CHECK(std::strlen(anyup_status_string(ANYUP_ERR_SHAPE)) > 0);
}

TEST_CASE("feature maps round trip through files") {
  const fs::path dir = fresh_dir("features");
  const auto data = ramp(3 * 4 * 5);
  anyup_features* f = nullptr;
  REQUIRE(anyup_features_create(3, 4, 5, data.data(), &f) == ANYUP_OK);
  int h = 0, w = 0, c = 0;
  REQUIRE(anyup_features_shape(f, &h, &w, &c) == ANYUP_OK);
  CHECK(h == 3);
  CHECK(w == 4);
  CHECK(c == 5);
  CHECK(std::memcmp(anyup_features_data(f), data.data(), data.size() * sizeof(float)) == 0);
  REQUIRE(anyup_features_write(f, (dir / "f.anyt").c_str()) == ANYUP_OK);
  anyup_features* g = nullptr;
  REQUIRE(anyup_features_read((dir / "f.anyt").c_str(), &g) == ANYUP_OK);
  CHECK(std::memcmp(anyup_features_data(g), data.data(), data.size() * sizeof(float)) == 0);
  anyup_features_free(f);
  anyup_features_free(g);
}

TEST_CASE("errors carry a status and a message") {
  anyup_features* f = nullptr;
  CHECK(anyup_features_create(0, 4, 5, nullptr, &f) != ANYUP_OK);
  CHECK(f == nullptr);
  CHECK(anyup_features_create(2, 2, 2, nullptr, nullptr) == ANYUP_ERR_INVALID_ARGUMENT);
  CHECK(std::strlen(anyup_last_error()) > 0);
  CHECK(anyup_features_read("/nonexistent/x.anyt", &f) == ANYUP_ERR_IO);
  const fs::path dir = fresh_dir("errors");
  std::ofstream(dir / "bad.anyt") << "XXXX not a tensor file";
  CHECK(anyup_features_read((dir / "bad.anyt").c_str(), &f) == ANYUP_ERR_FORMAT);
  anyup_image* img = nullptr;
  CHECK(anyup_image_load((dir / "bad.anyt").c_str(), &img) == ANYUP_ERR_FORMAT);
  anyup_features_free(nullptr);
  anyup_image_free(nullptr);
  anyup_model_free(nullptr);
  anyup_report_free(nullptr);
}

TEST_CASE("images, encoding and upsampling") {
  const fs::path dir = fresh_dir("upsample");
  anyup_image* img = nullptr;
  REQUIRE(anyup_image_synthetic(32, 3, &img) == ANYUP_OK);
  REQUIRE(anyup_image_save(img, (dir / "i.png").c_str()) == ANYUP_OK);
  anyup_image* loaded = nullptr;
  REQUIRE(anyup_image_load((dir / "i.png").c_str(), &loaded) == ANYUP_OK);
  int h = 0, w = 0;
  anyup_image_shape(loaded, &h, &w);
  CHECK(h == 32);
  anyup_image* small = nullptr;
  REQUIRE(anyup_image_resize(img, 16, 8, &small) == ANYUP_OK);
  anyup_image_shape(small, &h, &w);
  CHECK(h == 16);
  CHECK(w == 8);

  anyup_encoder_options enc;
  anyup_encoder_options_default(&enc);
  anyup_features* p = nullptr;
  REQUIRE(anyup_encode(img, &enc, 0, &p) == ANYUP_OK);
  int c = 0;
  anyup_features_shape(p, &h, &w, &c);
  CHECK(h == 4);
  CHECK(c == enc.feature_dim);

  anyup_model_options mo;
  anyup_model_options_default(&mo);
  anyup_model* model = nullptr;
  REQUIRE(anyup_model_create(&mo, &model) == ANYUP_OK);
  anyup_features* up = nullptr;
  REQUIRE(anyup_upsample(model, img, p, 0, 0, &up) == ANYUP_OK);
  anyup_features_shape(up, &h, &w, &c);
  CHECK(h == 32);
  CHECK(w == 32);
  CHECK(c == enc.feature_dim);

  const auto wide_data = ramp(4 * 4 * 384);
  anyup_features* wide = nullptr;
  REQUIRE(anyup_features_create(4, 4, 384, wide_data.data(), &wide) == ANYUP_OK);
  anyup_features* wide_up = nullptr;
  REQUIRE(anyup_upsample(model, img, wide, 24, 20, &wide_up) == ANYUP_OK);
  anyup_features_shape(wide_up, &h, &w, &c);
  CHECK(h == 24);
  CHECK(w == 20);
  CHECK(c == 384);

  REQUIRE(anyup_model_save(model, (dir / "ck").c_str()) == ANYUP_OK);
  anyup_model* reloaded = nullptr;
  REQUIRE(anyup_model_load((dir / "ck").c_str(), &reloaded) == ANYUP_OK);
  anyup_features* up2 = nullptr;
  REQUIRE(anyup_upsample(reloaded, img, p, 0, 0, &up2) == ANYUP_OK);
  CHECK(std::memcmp(anyup_features_data(up), anyup_features_data(up2), 32 * 32 * sizeof(float) * enc.feature_dim) == 0);

  REQUIRE(anyup_model_set_window_radius(reloaded, 0) == ANYUP_OK);
  anyup_model_options got;
  anyup_model_options_get(reloaded, &got);
  CHECK(got.window_radius == 0);
  anyup_features* same = nullptr;
  REQUIRE(anyup_upsample(reloaded, img, p, 4, 4, &same) == ANYUP_OK);
  CHECK(std::memcmp(anyup_features_data(same), anyup_features_data(p), 16 * sizeof(float) * enc.feature_dim) == 0);
  CHECK(anyup_model_set_window_radius(reloaded, -1) != ANYUP_OK);
  CHECK(anyup_model_load((dir / "missing").c_str(), &reloaded) == ANYUP_ERR_IO);

  anyup_image* rgb = nullptr;
  REQUIRE(anyup_pca_rgb(up, nullptr, &rgb) == ANYUP_OK);
  anyup_image_shape(rgb, &h, &w);
  CHECK(h == 32);
  for (int i = 0; i < 32 * 32 * 3; ++i) {
    REQUIRE(anyup_image_data(rgb)[i] >= 0.0f);
    REQUIRE(anyup_image_data(rgb)[i] <= 1.0f);
  }

  for (anyup_features* f : {p, up, wide, wide_up, up2, same}) anyup_features_free(f);
  for (anyup_image* i : {img, loaded, small, rgb}) anyup_image_free(i);
  anyup_model_free(model);
  anyup_model_free(reloaded);
}

TEST_CASE("training through the C interface") {
  const fs::path dir = fresh_dir("train");
  anyup_train_options o;
  anyup_train_options_default(&o);
  CHECK(o.steps == 2000);
  CHECK(o.batch_size == 4);
  CHECK(o.source_augmentation == 1);
  CHECK(anyup_train(&o, nullptr) == ANYUP_ERR_INVALID_ARGUMENT);

  Counter counter;
  o.steps = 3;
  o.image_size = 32;
  o.crop_size = 16;
  o.batch_size = 2;
  o.encoder.patch_size = 4;
  o.encoder.feature_dim = 8;
  o.synthetic_count = 2;
  const std::string out = (dir / "run").string();
  o.out_dir = out.c_str();
  o.on_step = count_row;
  o.user_data = &counter;
  anyup_model* model = nullptr;
  REQUIRE(anyup_train(&o, &model) == ANYUP_OK);
  CHECK(counter.rows == 3);
  CHECK(counter.last == 3);
  CHECK(model != nullptr);
  CHECK(fs::exists(dir / "run" / "manifest.json"));
  CHECK(fs::exists(dir / "run" / "train_log.csv"));
  anyup_model_free(model);

  o.crop_size = 14;
  CHECK(anyup_train(&o, nullptr) == ANYUP_ERR_VALIDATION);
}

TEST_CASE("evaluation reports") {
  anyup_eval_options o;
  anyup_eval_options_default(&o);
  o.image_count = 4;
  o.image_size = 32;
  o.probe_steps = 50;
  o.method = ANYUP_METHOD_BILINEAR;
  o.protocol = ANYUP_PROTOCOL_PRESERVE;
  anyup_report* report = nullptr;
  REQUIRE(anyup_evaluate(nullptr, &o, &report) == ANYUP_OK);
  double acc = -1;
  REQUIRE(anyup_report_get(report, "accuracy", &acc) == ANYUP_OK);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(std::string(anyup_report_text(report)).rfind("method=bilinear\ntask=segmentation\n", 0) == 0);
  CHECK(anyup_report_get(report, "nope", &acc) == ANYUP_ERR_VALIDATION);
  const fs::path dir = fresh_dir("eval");
  REQUIRE(anyup_report_write(report, (dir / "r.txt").c_str()) == ANYUP_OK);
  CHECK(fs::file_size(dir / "r.txt") == std::strlen(anyup_report_text(report)));
  anyup_report_free(report);

  o.task = ANYUP_TASK_DEPTH;
  o.method = ANYUP_METHOD_NEAREST;
  REQUIRE(anyup_evaluate(nullptr, &o, &report) == ANYUP_OK);
  double rmse = -1;
  CHECK(anyup_report_get(report, "rmse", &rmse) == ANYUP_OK);
  CHECK(rmse >= 0.0);
  anyup_report_free(report);

  o.method = ANYUP_METHOD_MODEL;
  CHECK(anyup_evaluate(nullptr, &o, &report) == ANYUP_ERR_INVALID_ARGUMENT);
}
