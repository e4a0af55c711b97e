#include "anyup/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include "anyup/feature_io.hpp"
#include "json.hpp"

namespace anyup {

using nlohmann::json;

namespace {

bool aligned(int v, int p) { return v % p == 0; }

}  // namespace

OptimizerState OptimizerState::zeros_like(const ParamSet& params) {
  return OptimizerState{params.zeros_like(), params.zeros_like(), 0};
}

void TrainConfig::validate() const {
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, ErrorKind::Validation,
          "learning_rate must be finite and >= 0");
  require(batch_size >= 1, ErrorKind::Validation, "batch_size must be >= 1");
  require(crops_per_image >= 1, ErrorKind::Validation, "crops_per_image must be >= 1");
  require(total_steps >= 1, ErrorKind::Validation, "total_steps must be >= 1");
  require(checkpoint_interval >= 0, ErrorKind::Validation, "checkpoint_interval must be >= 0");
  encoder.validate();
  upsampler.validate();
  loss_weights.validate();
  const int P = encoder.patch_size;
  require(crop_size >= P && crop_size <= image_size, ErrorKind::Validation,
          "crop_size must lie in [patch_size, image_size]");
  require(aligned(image_size, P) && aligned(crop_size, P), ErrorKind::Validation,
          "image_size and crop_size must be multiples of the patch size");
  require(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1 &&
              optimizer.epsilon > 0 && optimizer.weight_decay >= 0,
          ErrorKind::Validation, "invalid AdamW hyperparameters");
}

GuidanceImage transform_source(const GuidanceImage& image, int symmetry, int channel_order) {
  require(symmetry >= 0 && symmetry < 8 && channel_order >= 0 && channel_order < 6, ErrorKind::Validation,
          "symmetry must be in [0, 8) and channel order in [0, 6)");
  require(image.channels == 3, ErrorKind::Shape, "source transform needs an RGB image");
  static constexpr int kOrders[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  const bool flip_x = symmetry & 1, flip_y = symmetry & 2, transpose = symmetry & 4;
  const int h = transpose ? image.width : image.height, w = transpose ? image.height : image.width;
  GuidanceImage out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int sy = transpose ? x : y, sx = transpose ? y : x;
      if (flip_y) sy = image.height - 1 - sy;
      if (flip_x) sx = image.width - 1 - sx;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(sy, sx, kOrders[channel_order][c]);
    }
  return out;
}

CropSpec sample_crop(int image_size, int crop_size, int patch_size, Rng& rng) {
  require(patch_size >= 1 && crop_size >= 1, ErrorKind::Validation, "crop and patch sizes must be positive");
  require(aligned(crop_size, patch_size) && aligned(image_size, patch_size), ErrorKind::Validation,
          "crop and image sizes must be multiples of the patch size");
  require(crop_size <= image_size, ErrorKind::Validation, "no valid crop position: crop larger than image");
  const std::uint64_t positions = std::uint64_t(image_size - crop_size) / patch_size + 1;
  const int oy = int(rng.below(positions)) * patch_size;
  const int ox = int(rng.below(positions)) * patch_size;
  return {oy, ox, crop_size};
}

TrainingExample build_training_example(const GuidanceImage& image, const ToyEncoder& encoder,
                                       std::span<const CropSpec> crops) {
  const int P = encoder.config().patch_size;
  require(!crops.empty(), ErrorKind::Validation, "at least one crop is required");
  require(image.channels == 3, ErrorKind::Shape, "training image must be RGB");
  require(aligned(image.height, P) && aligned(image.width, P), ErrorKind::Validation,
          "image " + image.shape_string() + " is not patch-aligned");
  const int size = crops.front().size;
  TrainingExample ex;
  ex.image = image;
  ex.patch_size = P;
  for (const CropSpec& c : crops) {
    require(c.size == size, ErrorKind::Validation, "all crops of an example must share one size");
    require(c.size > 0 && aligned(c.size, P) && aligned(c.offset_y, P) && aligned(c.offset_x, P),
            ErrorKind::Validation, "crop is not aligned to the patch size");
    require(c.offset_y >= 0 && c.offset_x >= 0 && c.offset_y + c.size <= image.height &&
                c.offset_x + c.size <= image.width,
            ErrorKind::Validation, "crop exceeds the image");
    CropTarget t;
    t.spec = c;
    t.image = GuidanceImage(slice<float>(image, c.offset_y, c.offset_x, c.size, c.size));
    t.target = encoder.encode(t.image);
    ex.crops.push_back(std::move(t));
  }
  // The low-res input sees the whole image at the crop's resolution.
  const int lr_h = image.height * size / image.width;
  require(lr_h * image.width == image.height * size && aligned(lr_h, P), ErrorKind::Validation,
          "downsampled image height is not patch-aligned");
  ex.features = encoder.encode(resize_bilinear(image, lr_h, size));
  return ex;
}

TrainingExample build_training_example(const GuidanceImage& image, const ToyEncoder& encoder, const CropSpec& crop) {
  return build_training_example(image, encoder, std::span(&crop, 1));
}

namespace {

struct Window {
  int y0, x0, size;
};

Window crop_window(int rows, int cols, const CropSpec& crop, int patch_size, int ratio) {
  require(patch_size >= 1 && ratio >= 1, ErrorKind::Validation, "patch size and ratio must be positive");
  require(crop.size > 0, ErrorKind::Validation, "crop size must be positive");
  const int cell = patch_size * ratio;
  require(crop.offset_y % cell == 0 && crop.offset_x % cell == 0 && crop.size % cell == 0, ErrorKind::Validation,
          "crop window is fractional in feature coordinates");
  const Window w{crop.offset_y / cell, crop.offset_x / cell, crop.size / cell};
  require(w.y0 >= 0 && w.x0 >= 0 && w.y0 + w.size <= rows && w.x0 + w.size <= cols, ErrorKind::Validation,
          "crop window outside the feature grid");
  return w;
}

}  // namespace

Grid extract_crop_features(const Grid& q, const CropSpec& crop, int patch_size, int ratio) {
  const Window w = crop_window(q.height, q.width, crop, patch_size, ratio);
  return slice(q, w.y0, w.x0, w.size, w.size);
}

FeatureMap extract_crop_features(const FeatureMap& q, const CropSpec& crop, int patch_size, int ratio) {
  const Window w = crop_window(q.height, q.width, crop, patch_size, ratio);
  return FeatureMap(slice<float>(q, w.y0, w.x0, w.size, w.size));
}

LossBreakdown compute_loss_and_gradients(const UpsamplerWeights& weights, std::span<const TrainingExample> batch,
                                         std::span<const std::uint64_t> aug_seeds, const LossWeights& lw,
                                         const AugmentationParams& augmentation, ParamSet* grads) {
  require(!batch.empty(), ErrorKind::Validation, "empty batch");
  require(aug_seeds.size() == batch.size(), ErrorKind::Validation, "one augmentation seed per example expected");
  lw.validate();
  const double inv_batch = 1.0 / double(batch.size());
  LossBreakdown out;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const TrainingExample& ex = batch[e];
    const Grid p = to_grid(ex.features);
    const std::pair<int, int> grid{ex.grid_height(), ex.grid_width()};
    const std::pair<int, int> full{ex.image.height, ex.image.width};
    const std::pair<int, int> clean_sizes[] = {grid, full};
    const ForwardPass clean = forward(weights, ex.image, p, clean_sizes);
    const GuidanceImage aug_image = apply_augmentation(ex.image, aug_seeds[e], augmentation);
    const ForwardPass aug = forward(weights, aug_image, p, std::span(&full, 1));
    const Grid& q = clean.outputs[0];

    // crop supervision on the matching slice of q
    Grid g_q(q.height, q.width, q.channels);
    double main = 0.0;
    const double inv_crops = 1.0 / double(ex.crops.size());
    for (const CropTarget& crop : ex.crops) {
      const Grid q_crop = extract_crop_features(q, crop.spec, ex.patch_size);
      Grid g_crop;
      main += inv_crops * cos_mse(q_crop, to_grid(crop.target), &g_crop, nullptr);
      const int y0 = crop.spec.offset_y / ex.patch_size, x0 = crop.spec.offset_x / ex.patch_size;
      for (int y = 0; y < g_crop.height; ++y)
        for (int x = 0; x < g_crop.width; ++x)
          for (int c = 0; c < q.channels; ++c) g_q.at(y0 + y, x0 + x, c) += lw.main * inv_crops * g_crop.at(y, x, c);
    }

    Grid g_input;
    const double input = input_consistency(q, p, &g_input);
    Grid g_clean_full, g_aug_full;
    const double self = cos_mse(clean.outputs[1], aug.outputs[0], &g_clean_full, &g_aug_full);

    out.main += inv_batch * main;
    out.input += inv_batch * input;
    out.self += inv_batch * self;
    if (!grads) continue;

    for (std::size_t i = 0; i < g_q.size(); ++i) g_q.data[i] = inv_batch * (g_q.data[i] + lw.input * g_input.data[i]);
    for (double& g : g_clean_full.data) g *= inv_batch * lw.self;
    for (double& g : g_aug_full.data) g *= inv_batch * lw.self;
    const Grid clean_grads[] = {std::move(g_q), std::move(g_clean_full)};
    backward(weights, clean, clean_grads, *grads);
    if (lw.self > 0.0) backward(weights, aug, std::span(&g_aug_full, 1), *grads);
  }
  out.total = total_loss({out.main, out.input, out.self}, lw);
  if (grads) {
    double sq = 0.0;
    for (const auto& t : *grads)
      for (double g : t.values) sq += g * g;
    out.grad_norm = std::sqrt(sq);
  }
  return out;
}

LossBreakdown train_step(UpsamplerWeights& weights, std::span<const TrainingExample> batch,
                         std::span<const std::uint64_t> aug_seeds, OptimizerState& state, const StepOptions& opt) {
  require(state.m.same_layout(weights.params) && state.v.same_layout(weights.params), ErrorKind::Validation,
          "optimizer state does not match the weights");
  ParamSet grads = weights.params.zeros_like();
  LossBreakdown loss =
      compute_loss_and_gradients(weights, batch, aug_seeds, opt.loss_weights, opt.augmentation, &grads);
  if (!std::isfinite(loss.total) || !std::isfinite(loss.grad_norm)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << opt.step_index << ": main=" << loss.main << " input=" << loss.input
        << " self=" << loss.self << " total=" << loss.total << " grad_norm=" << loss.grad_norm;
    fail(ErrorKind::Numerical, msg.str());
  }

  const double clip = (opt.grad_clip > 0.0 && loss.grad_norm > opt.grad_clip) ? opt.grad_clip / loss.grad_norm : 1.0;
  const AdamWParams& a = opt.optimizer;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(a.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(a.beta2, double(state.step));
  const double lr = opt.learning_rate;
  for (std::size_t t = 0; t < weights.params.size(); ++t) {
    auto& theta = weights.params[t].values;
    auto& m = state.m[t].values;
    auto& v = state.v[t].values;
    const auto& g = grads[t].values;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i] * clip;
      double th = theta[i] - lr * a.weight_decay * theta[i];
      const double mi = a.beta1 * m[i] + (1.0 - a.beta1) * gi;
      const double vi = a.beta2 * v[i] + (1.0 - a.beta2) * gi * gi;
      th -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + a.epsilon);
      // master copies stay on the float32 grid so checkpoints are exact
      theta[i] = static_cast<float>(th);
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Synthetic data

SyntheticScene synthetic_scene(int size, std::uint64_t seed) {
  require(size >= 1, ErrorKind::Validation, "image size must be positive");
  Rng rng(mix_seed(seed, 0x73796e74ULL));
  SyntheticScene scene{GuidanceImage(size, size), std::vector<float>(std::size_t(size) * size)};
  GuidanceImage& img = scene.image;
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform();
    c1[c] = rng.uniform();
  }
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(angle), dy = std::sin(angle);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double t = std::clamp(0.5 + ((x + 0.5) / size - 0.5) * dx + ((y + 0.5) / size - 0.5) * dy, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = float(c0[c] + (c1[c] - c0[c]) * t);
      scene.depth[std::size_t(y) * size + x] = float(2.0 + 2.0 * t);
    }

  const int shapes = 3 + int(rng.below(5));
  for (int s = 0; s < shapes; ++s) {
    const double cx = rng.uniform(0.0, size), cy = rng.uniform(0.0, size);
    const double radius = rng.uniform(0.1, 0.35) * size;
    const int n = 3 + int(rng.below(4));
    std::vector<double> angles(n);
    for (double& t : angles) t = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::sort(angles.begin(), angles.end());
    std::vector<std::pair<double, double>> poly;
    for (double t : angles) {
      const double r = radius * rng.uniform(0.6, 1.0);
      poly.emplace_back(cx + r * std::cos(t), cy + r * std::sin(t));
    }
    double color[3];
    for (double& c : color) c = rng.uniform();
    const float depth = float(rng.uniform(0.5, 1.5));
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        bool inside = false;
        for (int i = 0, j = n - 1; i < n; j = i++) {
          const auto [xi, yi] = poly[i];
          const auto [xj, yj] = poly[j];
          if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
        }
        if (inside) {
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = float(color[c]);
          scene.depth[std::size_t(y) * size + x] = depth;
        }
      }
  }
  return scene;
}

GuidanceImage synthetic_image(int size, std::uint64_t seed) { return synthetic_scene(size, seed).image; }

std::vector<GuidanceImage> synthetic_dataset(int count, int size, std::uint64_t seed) {
  require(count >= 1, ErrorKind::Validation, "synthetic dataset needs at least one image");
  std::vector<GuidanceImage> out;
  for (int i = 0; i < count; ++i) out.push_back(synthetic_image(size, mix_seed(seed, std::uint64_t(i))));
  return out;
}

std::vector<GuidanceImage> load_dataset(std::span<const std::filesystem::path> paths, int size,
                                        const std::function<void(const std::string&)>& warn) {
  require(!paths.empty(), ErrorKind::Validation, "dataset is empty");
  std::vector<GuidanceImage> out;
  for (const auto& path : paths) {
    try {
      GuidanceImage img = load_image(path);
      out.push_back(resize_bilinear(img, size, size));
    } catch (const Error& e) {
      if (warn) warn("skipping " + path.string() + ": " + e.what());
    }
  }
  require(!out.empty(), ErrorKind::Validation, "no readable image in the dataset");
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json to_json(const EncoderConfig& c) {
  return {{"patch_size", c.patch_size}, {"feature_dim", c.feature_dim}, {"hidden_dim", c.hidden_dim}, {"seed", c.seed}};
}

json to_json(const UpsamplerConfig& c) {
  return {{"query_dim", c.query_dim},
          {"key_dim", c.key_dim},
          {"num_res_blocks", c.num_res_blocks},
          {"window_radius", c.window_radius},
          {"pos_enc_frequencies", c.pos_enc_frequencies},
          {"agnostic_M", c.agnostic_M},
          {"agnostic_k", c.agnostic_k},
          {"image_dim", c.image_dim},
          {"seed", c.seed}};
}

json to_json(const AugmentationParams& a) {
  return {{"p_brightness", a.p_brightness}, {"brightness_min", a.brightness_min}, {"brightness_max", a.brightness_max},
          {"p_contrast", a.p_contrast},     {"contrast_min", a.contrast_min},     {"contrast_max", a.contrast_max},
          {"p_grayscale", a.p_grayscale},   {"p_blur", a.p_blur},                 {"blur_sigma_max", a.blur_sigma_max},
          {"p_noise", a.p_noise},           {"noise_sigma_max", a.noise_sigma_max}};
}

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"crops_per_image", c.crops_per_image},
          {"total_steps", c.total_steps},
          {"image_size", c.image_size},
          {"crop_size", c.crop_size},
          {"seed", c.seed},
          {"loss_weights", {{"main", c.loss_weights.main}, {"input", c.loss_weights.input}, {"self", c.loss_weights.self}}},
          {"optimizer",
           {{"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"epsilon", c.optimizer.epsilon},
            {"weight_decay", c.optimizer.weight_decay}}},
          {"grad_clip", c.grad_clip},
          {"checkpoint_interval", c.checkpoint_interval},
          {"encoder", to_json(c.encoder)},
          {"upsampler", to_json(c.upsampler)},
          {"augmentation", to_json(c.augmentation)},
          {"source_augmentation", c.source_augmentation}};
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  c.patch_size = j.at("patch_size").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

UpsamplerConfig upsampler_from_json(const json& j) {
  UpsamplerConfig c;
  c.query_dim = j.at("query_dim").get<int>();
  c.key_dim = j.at("key_dim").get<int>();
  c.num_res_blocks = j.at("num_res_blocks").get<int>();
  c.window_radius = j.at("window_radius").get<int>();
  c.pos_enc_frequencies = j.at("pos_enc_frequencies").get<int>();
  c.agnostic_M = j.at("agnostic_M").get<int>();
  c.agnostic_k = j.at("agnostic_k").get<int>();
  c.image_dim = j.at("image_dim").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

AugmentationParams augmentation_from_json(const json& j) {
  AugmentationParams a;
  a.p_brightness = j.at("p_brightness").get<double>();
  a.brightness_min = j.at("brightness_min").get<double>();
  a.brightness_max = j.at("brightness_max").get<double>();
  a.p_contrast = j.at("p_contrast").get<double>();
  a.contrast_min = j.at("contrast_min").get<double>();
  a.contrast_max = j.at("contrast_max").get<double>();
  a.p_grayscale = j.at("p_grayscale").get<double>();
  a.p_blur = j.at("p_blur").get<double>();
  a.blur_sigma_max = j.at("blur_sigma_max").get<double>();
  a.p_noise = j.at("p_noise").get<double>();
  a.noise_sigma_max = j.at("noise_sigma_max").get<double>();
  return a;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.crops_per_image = j.at("crops_per_image").get<int>();
  c.total_steps = j.at("total_steps").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.crop_size = j.at("crop_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  const json& lw = j.at("loss_weights");
  c.loss_weights = {lw.at("main").get<double>(), lw.at("input").get<double>(), lw.at("self").get<double>()};
  const json& o = j.at("optimizer");
  c.optimizer = {o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("epsilon").get<double>(),
                 o.at("weight_decay").get<double>()};
  c.grad_clip = j.at("grad_clip").get<double>();
  c.checkpoint_interval = j.at("checkpoint_interval").get<int>();
  c.encoder = encoder_from_json(j.at("encoder"));
  c.upsampler = upsampler_from_json(j.at("upsampler"));
  c.augmentation = augmentation_from_json(j.at("augmentation"));
  c.source_augmentation = j.at("source_augmentation").get<bool>();
  return c;
}

FeatureMap tensor_to_map(const ParamTensor& t) {
  FeatureMap m(t.shape[0], t.shape[1], t.shape[2]);
  for (std::size_t i = 0; i < t.size(); ++i) m.data[i] = static_cast<float>(t.values[i]);
  return m;
}

void map_to_tensor(const FeatureMap& m, ParamTensor& t, const std::string& file) {
  require(m.height == t.shape[0] && m.width == t.shape[1] && m.channels == t.shape[2], ErrorKind::Shape,
          file + " has shape " + m.shape_string() + ", manifest expects another");
  for (std::size_t i = 0; i < t.size(); ++i) t.values[i] = m.data[i];
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  ck.weights.validate();
  require(ck.optimizer.m.same_layout(ck.weights.params) && ck.optimizer.v.same_layout(ck.weights.params),
          ErrorKind::Validation, "optimizer state does not match the weights");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec && std::filesystem::is_directory(dir), ErrorKind::Io, "cannot create checkpoint directory " + dir.string());

  json tensors = json::array();
  for (std::size_t i = 0; i < ck.weights.params.size(); ++i) {
    const ParamTensor& t = ck.weights.params[i];
    const std::string file = t.name + ".anyt", m_file = t.name + ".adam_m.anyt", v_file = t.name + ".adam_v.anyt";
    write_feature_map(tensor_to_map(t), dir / file);
    write_feature_map(tensor_to_map(ck.optimizer.m[i]), dir / m_file);
    write_feature_map(tensor_to_map(ck.optimizer.v[i]), dir / v_file);
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"file", file}, {"adam_m", m_file}, {"adam_v", v_file}});
  }
  json manifest = {{"format", "anyup-checkpoint"},
                   {"format_version", kCheckpointVersion},
                   {"step", ck.step},
                   {"optimizer_step", ck.optimizer.step},
                   {"upsampler", to_json(ck.weights.config)},
                   {"train_config", ck.train_config ? to_json(*ck.train_config) : json(nullptr)},
                   {"tensors", tensors}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  require(bool(out), ErrorKind::Io, "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
  require(bool(out), ErrorKind::Io, "write failed for manifest.json");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  require(bool(in), ErrorKind::Io, "cannot open " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    require(manifest.value("format", "") == "anyup-checkpoint", ErrorKind::Format, "not an anyup checkpoint manifest");
    const int version = manifest.at("format_version").get<int>();
    require(version == kCheckpointVersion, ErrorKind::Unsupported,
            "checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                std::to_string(kCheckpointVersion) + ")");
    Checkpoint ck;
    ck.step = manifest.at("step").get<std::int64_t>();
    ck.weights.config = upsampler_from_json(manifest.at("upsampler"));
    ck.weights.params = UpsamplerWeights::layout(ck.weights.config);
    ck.optimizer = OptimizerState::zeros_like(ck.weights.params);
    ck.optimizer.step = manifest.at("optimizer_step").get<std::int64_t>();
    if (!manifest.at("train_config").is_null()) ck.train_config = train_config_from_json(manifest.at("train_config"));

    const json& tensors = manifest.at("tensors");
    require(tensors.size() == ck.weights.params.size(), ErrorKind::Format, "manifest tensor list does not match config");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const json& t = tensors[i];
      require(t.at("name").get<std::string>() == ck.weights.params[i].name, ErrorKind::Format,
              "unexpected tensor " + t.at("name").get<std::string>());
      map_to_tensor(read_feature_map(dir / t.at("file").get<std::string>()), ck.weights.params[i], t.at("file"));
      map_to_tensor(read_feature_map(dir / t.at("adam_m").get<std::string>()), ck.optimizer.m[i], t.at("adam_m"));
      map_to_tensor(read_feature_map(dir / t.at("adam_v").get<std::string>()), ck.optimizer.v[i], t.at("adam_v"));
    }
    ck.weights.validate();
    return ck;
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "malformed manifest " + manifest_path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Driver

void write_log_csv(std::span<const LogRow> log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(bool(out), ErrorKind::Io, "cannot write " + path.string());
  out << "step,loss_main,loss_input,loss_self,loss_total,wall_ms\n";
  out << std::setprecision(17);
  for (const LogRow& r : log)
    out << r.step << ',' << r.loss.main << ',' << r.loss.input << ',' << r.loss.self << ',' << r.loss.total << ','
        << std::fixed << std::setprecision(3) << r.wall_ms << std::defaultfloat << std::setprecision(17) << '\n';
  require(bool(out), ErrorKind::Io, "write failed for " + path.string());
}

TrainResult train(const TrainConfig& config, std::span<const GuidanceImage> dataset, const TrainOptions& options) {
  config.validate();
  require(!dataset.empty(), ErrorKind::Validation, "dataset is empty");
  for (const auto& img : dataset)
    require(img.height == config.image_size && img.width == config.image_size, ErrorKind::Validation,
            "dataset image " + img.shape_string() + " does not match image_size " + std::to_string(config.image_size));

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  if (options.resume_from) {
    ck = load_checkpoint(*options.resume_from);
    require(ck.weights.config == config.upsampler, ErrorKind::Validation,
            "checkpoint upsampler config differs from the training config");
  } else {
    ck.weights = UpsamplerWeights::initialize(config.upsampler);
    ck.optimizer = OptimizerState::zeros_like(ck.weights.params);
  }
  ck.train_config = config;
  const ToyEncoder encoder(config.encoder);

  StepOptions opt;
  opt.learning_rate = config.learning_rate;
  opt.optimizer = config.optimizer;
  opt.grad_clip = config.grad_clip;
  opt.loss_weights = config.loss_weights;
  opt.augmentation = config.augmentation;

  if (!options.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.out_dir, ec);
    require(!ec, ErrorKind::Io, "cannot create " + options.out_dir.string());
  }

  std::vector<std::size_t> order(dataset.size());
  for (std::int64_t step = ck.step + 1; step <= config.total_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(mix_seed(config.seed, std::uint64_t(step)));
    // a fresh permutation per step: distinct images while the dataset lasts
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<TrainingExample> batch;
    std::vector<std::uint64_t> seeds;
    for (int b = 0; b < config.batch_size; ++b) {
      const std::size_t image_index = order[std::size_t(b) % order.size()];
      GuidanceImage source = dataset[image_index];
      if (config.source_augmentation) {
        const int symmetry = int(rng.below(8));
        source = transform_source(source, symmetry, int(rng.below(6)));
      }
      std::vector<CropSpec> crops;
      for (int c = 0; c < config.crops_per_image; ++c)
        crops.push_back(sample_crop(config.image_size, config.crop_size, config.encoder.patch_size, rng));
      batch.push_back(build_training_example(source, encoder, crops));
      seeds.push_back(rng.next());
    }
    opt.step_index = step;
    LogRow row;
    row.step = step;
    row.loss = train_step(ck.weights, batch, seeds, ck.optimizer, opt);
    ck.step = step;
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(row);
    if (options.on_step) options.on_step(row);

    if (!options.out_dir.empty() && config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 &&
        step != config.total_steps) {
      std::ostringstream name;
      name << "step_" << std::setw(6) << std::setfill('0') << step;
      save_checkpoint(ck, options.out_dir / name.str());
    }
  }
  if (!options.out_dir.empty()) {
    save_checkpoint(ck, options.out_dir);
    write_log_csv(result.log, options.out_dir / "train_log.csv");
  }
  return result;
}

}  // namespace anyup
