#include "anyup/anyup.h"

#include <exception>
#include <fstream>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "anyup/eval_probe.hpp"
#include "anyup/feature_io.hpp"
#include "anyup/training.hpp"
#include "anyup/upsampler.hpp"

struct anyup_features {
  anyup::FeatureMap map;
};

struct anyup_image {
  anyup::GuidanceImage image;
};

struct anyup_model {
  anyup::UpsamplerWeights weights;
};

struct anyup_report {
  anyup::MetricReport report;
  std::string text;
};

namespace {

thread_local std::string last_error;

anyup_status status_of(anyup::ErrorKind kind) {
  switch (kind) {
    case anyup::ErrorKind::Io: return ANYUP_ERR_IO;
    case anyup::ErrorKind::Format: return ANYUP_ERR_FORMAT;
    case anyup::ErrorKind::Unsupported: return ANYUP_ERR_UNSUPPORTED;
    case anyup::ErrorKind::Shape: return ANYUP_ERR_SHAPE;
    case anyup::ErrorKind::Validation: return ANYUP_ERR_VALIDATION;
    case anyup::ErrorKind::Numerical: return ANYUP_ERR_NUMERICAL;
  }
  return ANYUP_ERR_INTERNAL;
}

anyup_status set_error(anyup_status status, std::string message) {
  last_error = std::move(message);
  return status;
}

template <typename Fn>
anyup_status guarded(Fn&& fn) noexcept {
  try {
    fn();
    return ANYUP_OK;
  } catch (const anyup::Error& e) {
    return set_error(status_of(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(ANYUP_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(ANYUP_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(ANYUP_ERR_INTERNAL, "unknown error");
  }
}

#define ANYUP_CHECK_ARG(cond, what) \
  if (!(cond)) return set_error(ANYUP_ERR_INVALID_ARGUMENT, what)

anyup::EncoderConfig encoder_config(const anyup_encoder_options& o) {
  anyup::EncoderConfig c;
  c.patch_size = o.patch_size;
  c.feature_dim = o.feature_dim;
  c.hidden_dim = o.hidden_dim;
  c.seed = o.seed;
  return c;
}

anyup_encoder_options encoder_options(const anyup::EncoderConfig& c) {
  return {c.patch_size, c.feature_dim, c.hidden_dim, c.seed};
}

anyup::UpsamplerConfig model_config(const anyup_model_options& o) {
  anyup::UpsamplerConfig c;
  c.query_dim = o.query_dim;
  c.key_dim = o.key_dim;
  c.num_res_blocks = o.num_res_blocks;
  c.window_radius = o.window_radius;
  c.pos_enc_frequencies = o.pos_enc_frequencies;
  c.agnostic_M = o.agnostic_m;
  c.agnostic_k = o.agnostic_k;
  c.image_dim = o.image_dim;
  c.seed = o.seed;
  return c;
}

anyup_model_options model_options(const anyup::UpsamplerConfig& c) {
  return {c.query_dim, c.key_dim, c.num_res_blocks, c.window_radius, c.pos_enc_frequencies,
          c.agnostic_M, c.agnostic_k, c.image_dim, c.seed};
}

}  // namespace

extern "C" {

const char* anyup_version(void) { return "0.1.0"; }

const char* anyup_status_string(anyup_status status) {
  switch (status) {
    case ANYUP_OK: return "ok";
    case ANYUP_ERR_IO: return "io error";
    case ANYUP_ERR_FORMAT: return "format error";
    case ANYUP_ERR_UNSUPPORTED: return "unsupported";
    case ANYUP_ERR_SHAPE: return "shape error";
    case ANYUP_ERR_VALIDATION: return "validation error";
    case ANYUP_ERR_NUMERICAL: return "numerical error";
    case ANYUP_ERR_INVALID_ARGUMENT: return "invalid argument";
    case ANYUP_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* anyup_last_error(void) { return last_error.c_str(); }

anyup_status anyup_features_create(int height, int width, int channels, const float* data, anyup_features** out) {
  ANYUP_CHECK_ARG(out, "out is null");
  ANYUP_CHECK_ARG(height > 0 && width > 0 && channels > 0, "feature extents must be positive");
  return guarded([&] {
    auto f = std::make_unique<anyup_features>();
    f->map = anyup::FeatureMap(height, width, channels);
    if (data) std::copy(data, data + f->map.size(), f->map.data.begin());
    f->map.validate();
    *out = f.release();
  });
}

anyup_status anyup_features_read(const char* path, anyup_features** out) {
  ANYUP_CHECK_ARG(path && out, "path and out are required");
  return guarded([&] { *out = new anyup_features{anyup::read_feature_map(path)}; });
}

anyup_status anyup_features_write(const anyup_features* features, const char* path) {
  ANYUP_CHECK_ARG(features && path, "features and path are required");
  return guarded([&] { anyup::write_feature_map(features->map, path); });
}

anyup_status anyup_features_shape(const anyup_features* features, int* height, int* width, int* channels) {
  ANYUP_CHECK_ARG(features, "features is null");
  if (height) *height = features->map.height;
  if (width) *width = features->map.width;
  if (channels) *channels = features->map.channels;
  return ANYUP_OK;
}

const float* anyup_features_data(const anyup_features* features) {
  return features ? features->map.data.data() : nullptr;
}

void anyup_features_free(anyup_features* features) { delete features; }

anyup_status anyup_image_create(int height, int width, const float* rgb, anyup_image** out) {
  ANYUP_CHECK_ARG(out && rgb, "rgb and out are required");
  ANYUP_CHECK_ARG(height > 0 && width > 0, "image extents must be positive");
  return guarded([&] {
    auto img = std::make_unique<anyup_image>();
    img->image = anyup::GuidanceImage(height, width);
    std::copy(rgb, rgb + img->image.size(), img->image.data.begin());
    img->image.validate();
    *out = img.release();
  });
}

anyup_status anyup_image_load(const char* path, anyup_image** out) {
  ANYUP_CHECK_ARG(path && out, "path and out are required");
  return guarded([&] { *out = new anyup_image{anyup::load_image(path)}; });
}

anyup_status anyup_image_save(const anyup_image* image, const char* path) {
  ANYUP_CHECK_ARG(image && path, "image and path are required");
  return guarded([&] { anyup::save_png(image->image, path); });
}

anyup_status anyup_image_synthetic(int size, uint64_t seed, anyup_image** out) {
  ANYUP_CHECK_ARG(out, "out is null");
  return guarded([&] { *out = new anyup_image{anyup::synthetic_image(size, seed)}; });
}

anyup_status anyup_image_resize(const anyup_image* image, int height, int width, anyup_image** out) {
  ANYUP_CHECK_ARG(image && out, "image and out are required");
  ANYUP_CHECK_ARG(height > 0 && width > 0, "target extents must be positive");
  return guarded([&] { *out = new anyup_image{anyup::resize_bilinear(image->image, height, width)}; });
}

anyup_status anyup_image_shape(const anyup_image* image, int* height, int* width) {
  ANYUP_CHECK_ARG(image, "image is null");
  if (height) *height = image->image.height;
  if (width) *width = image->image.width;
  return ANYUP_OK;
}

const float* anyup_image_data(const anyup_image* image) { return image ? image->image.data.data() : nullptr; }

void anyup_image_free(anyup_image* image) { delete image; }

void anyup_encoder_options_default(anyup_encoder_options* options) {
  if (options) *options = encoder_options(anyup::EncoderConfig{});
}

anyup_status anyup_encode(const anyup_image* image, const anyup_encoder_options* options, int stride,
                          anyup_features** out) {
  ANYUP_CHECK_ARG(image && options && out, "image, options and out are required");
  ANYUP_CHECK_ARG(stride >= 0, "stride must be >= 0");
  return guarded([&] {
    const anyup::ToyEncoder encoder(encoder_config(*options));
    *out = new anyup_features{stride == 0 ? encoder.encode(image->image) : encoder.encode_dense(image->image, stride)};
  });
}

void anyup_model_options_default(anyup_model_options* options) {
  if (options) *options = model_options(anyup::UpsamplerConfig{});
}

anyup_status anyup_model_create(const anyup_model_options* options, anyup_model** out) {
  ANYUP_CHECK_ARG(options && out, "options and out are required");
  return guarded([&] { *out = new anyup_model{anyup::UpsamplerWeights::initialize(model_config(*options))}; });
}

anyup_status anyup_model_load(const char* checkpoint_dir, anyup_model** out) {
  ANYUP_CHECK_ARG(checkpoint_dir && out, "checkpoint_dir and out are required");
  return guarded([&] { *out = new anyup_model{anyup::load_checkpoint(checkpoint_dir).weights}; });
}

anyup_status anyup_model_save(const anyup_model* model, const char* checkpoint_dir) {
  ANYUP_CHECK_ARG(model && checkpoint_dir, "model and checkpoint_dir are required");
  return guarded([&] {
    anyup::Checkpoint ck{model->weights, anyup::OptimizerState::zeros_like(model->weights.params), 0, std::nullopt};
    anyup::save_checkpoint(ck, checkpoint_dir);
  });
}

anyup_status anyup_model_options_get(const anyup_model* model, anyup_model_options* options) {
  ANYUP_CHECK_ARG(model && options, "model and options are required");
  *options = model_options(model->weights.config);
  return ANYUP_OK;
}

anyup_status anyup_model_set_window_radius(anyup_model* model, int radius) {
  ANYUP_CHECK_ARG(model, "model is null");
  ANYUP_CHECK_ARG(radius >= 0, "window radius must be >= 0");
  model->weights.config.window_radius = radius;
  return ANYUP_OK;
}

void anyup_model_free(anyup_model* model) { delete model; }

anyup_status anyup_upsample(const anyup_model* model, const anyup_image* image, const anyup_features* features,
                            int out_height, int out_width, anyup_features** out) {
  ANYUP_CHECK_ARG(model && image && features && out, "model, image, features and out are required");
  ANYUP_CHECK_ARG(out_height >= 0 && out_width >= 0, "output extents must be >= 0");
  return guarded([&] {
    const int h = out_height ? out_height : image->image.height;
    const int w = out_width ? out_width : image->image.width;
    *out = new anyup_features{anyup::upsample(model->weights, image->image, features->map, h, w)};
  });
}

void anyup_train_options_default(anyup_train_options* options) {
  if (!options) return;
  const anyup::TrainConfig c;
  *options = anyup_train_options{};
  options->learning_rate = c.learning_rate;
  options->batch_size = c.batch_size;
  options->crops_per_image = c.crops_per_image;
  options->steps = c.total_steps;
  options->image_size = c.image_size;
  options->crop_size = c.crop_size;
  options->seed = c.seed;
  options->weight_main = c.loss_weights.main;
  options->weight_input = c.loss_weights.input;
  options->weight_self = c.loss_weights.self;
  options->weight_decay = c.optimizer.weight_decay;
  options->grad_clip = c.grad_clip;
  options->checkpoint_interval = c.checkpoint_interval;
  options->source_augmentation = c.source_augmentation ? 1 : 0;
  options->encoder = encoder_options(c.encoder);
  options->model = model_options(c.upsampler);
  options->synthetic_count = 10;
}

anyup_status anyup_train(const anyup_train_options* options, anyup_model** model) {
  ANYUP_CHECK_ARG(options, "options is null");
  ANYUP_CHECK_ARG(options->out_dir && *options->out_dir, "out_dir is required");
  ANYUP_CHECK_ARG(options->image_path_count >= 0, "image_path_count must be >= 0");
  ANYUP_CHECK_ARG(options->image_path_count == 0 || options->image_paths, "image_paths is null");
  return guarded([&] {
    anyup::TrainConfig c;
    c.learning_rate = options->learning_rate;
    c.batch_size = options->batch_size;
    c.crops_per_image = options->crops_per_image;
    c.total_steps = options->steps;
    c.image_size = options->image_size;
    c.crop_size = options->crop_size;
    c.seed = options->seed;
    c.loss_weights = {options->weight_main, options->weight_input, options->weight_self};
    c.optimizer.weight_decay = options->weight_decay;
    c.grad_clip = options->grad_clip;
    c.checkpoint_interval = options->checkpoint_interval;
    c.source_augmentation = options->source_augmentation != 0;
    c.encoder = encoder_config(options->encoder);
    c.upsampler = model_config(options->model);
    c.validate();

    std::vector<anyup::GuidanceImage> dataset;
    if (options->image_path_count > 0) {
      std::vector<std::filesystem::path> paths(options->image_paths, options->image_paths + options->image_path_count);
      dataset = anyup::load_dataset(paths, c.image_size, [&](const std::string& message) {
        if (options->on_warning) options->on_warning(message.c_str(), options->user_data);
      });
    } else {
      dataset = anyup::synthetic_dataset(options->synthetic_count, c.image_size, c.seed);
    }

    anyup::TrainOptions run;
    run.out_dir = options->out_dir;
    if (options->resume_from && *options->resume_from) run.resume_from = options->resume_from;
    if (options->on_step)
      run.on_step = [&](const anyup::LogRow& r) {
        const anyup_train_row row{r.step, r.loss.main, r.loss.input, r.loss.self, r.loss.total, r.wall_ms};
        options->on_step(&row, options->user_data);
      };
    anyup::TrainResult result = anyup::train(c, dataset, run);
    if (model) *model = new anyup_model{std::move(result.checkpoint.weights)};
  });
}

void anyup_eval_options_default(anyup_eval_options* options) {
  if (!options) return;
  *options = anyup_eval_options{};
  options->method = ANYUP_METHOD_MODEL;
  options->protocol = ANYUP_PROTOCOL_PROBE;
  options->task = ANYUP_TASK_SEGMENTATION;
  options->image_count = 20;
  options->image_size = 64;
  options->downsample_ratio = 2;
  options->num_classes = 4;
  const anyup::ProbeParams probe;
  options->probe_steps = probe.steps;
  options->probe_learning_rate = probe.learning_rate;
  options->seed = 0;
  options->encoder = encoder_options(anyup::EncoderConfig{});
}

anyup_status anyup_evaluate(const anyup_model* model, const anyup_eval_options* options, anyup_report** out) {
  ANYUP_CHECK_ARG(options && out, "options and out are required");
  ANYUP_CHECK_ARG(options->method != ANYUP_METHOD_MODEL || model, "the model method needs a model");
  ANYUP_CHECK_ARG(options->method >= ANYUP_METHOD_MODEL && options->method <= ANYUP_METHOD_NEAREST, "unknown method");
  ANYUP_CHECK_ARG(options->protocol == ANYUP_PROTOCOL_PROBE || options->protocol == ANYUP_PROTOCOL_PRESERVE,
                  "unknown protocol");
  ANYUP_CHECK_ARG(options->task == ANYUP_TASK_SEGMENTATION || options->task == ANYUP_TASK_DEPTH, "unknown task");
  return guarded([&] {
    const anyup::SyntheticProbeSet set =
        anyup::make_synthetic_probe_set(options->image_count, encoder_config(options->encoder), options->image_size,
                                        options->downsample_ratio, options->num_classes, options->seed);
    anyup::FeatureUpsampler up;
    const char* method = "model";
    switch (options->method) {
      case ANYUP_METHOD_MODEL:
        up = [&](const anyup::FeatureMap& f, const anyup::GuidanceImage& img, int h, int w) {
          return anyup::upsample(model->weights, img, f, h, w);
        };
        break;
      case ANYUP_METHOD_BILINEAR:
        method = "bilinear";
        up = [](const anyup::FeatureMap& f, const anyup::GuidanceImage&, int h, int w) {
          return anyup::resize_bilinear(f, h, w);
        };
        break;
      case ANYUP_METHOD_NEAREST:
        method = "nearest";
        up = [](const anyup::FeatureMap& f, const anyup::GuidanceImage&, int h, int w) {
          return anyup::resize_nearest(f, h, w);
        };
        break;
    }
    anyup::ProbeParams params;
    params.steps = options->probe_steps;
    params.learning_rate = options->probe_learning_rate;
    params.seed = options->seed;
    const auto task = options->task == ANYUP_TASK_DEPTH ? anyup::ProbeTask::Depth : anyup::ProbeTask::Segmentation;
    const auto protocol = options->protocol == ANYUP_PROTOCOL_PRESERVE ? anyup::ProbeProtocol::PreTrainedLowRes
                                                                       : anyup::ProbeProtocol::TrainOnUpsampled;
    auto report = std::make_unique<anyup_report>();
    report->report = anyup::run_probe_protocol(up, set, task, protocol, params);
    report->text = "method=" + std::string(method) + '\n' + report->report.to_text();
    *out = report.release();
  });
}

anyup_status anyup_report_get(const anyup_report* report, const char* name, double* value) {
  ANYUP_CHECK_ARG(report && name && value, "report, name and value are required");
  return guarded([&] { *value = report->report.get(name); });
}

const char* anyup_report_text(const anyup_report* report) { return report ? report->text.c_str() : ""; }

anyup_status anyup_report_write(const anyup_report* report, const char* path) {
  ANYUP_CHECK_ARG(report && path, "report and path are required");
  return guarded([&] {
    std::ofstream out(path, std::ios::trunc);
    anyup::require(bool(out), anyup::ErrorKind::Io, std::string("cannot write ") + path);
    out << report->text;
    anyup::require(bool(out), anyup::ErrorKind::Io, std::string("write failed for ") + path);
  });
}

void anyup_report_free(anyup_report* report) { delete report; }

anyup_status anyup_pca_rgb(const anyup_features* features, const anyup_features* basis, anyup_image** out) {
  ANYUP_CHECK_ARG(features && out, "features and out are required");
  return guarded([&] { *out = new anyup_image{anyup::pca_rgb(features->map, basis ? &basis->map : nullptr)}; });
}

}  // extern "C"
