#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "anyup/losses.hpp"
#include "anyup/rng.hpp"
#include "anyup/toy_encoder.hpp"
#include "anyup/upsampler.hpp"

namespace anyup {

/// Square crop in pixels; offsets and size are multiples of the patch size.
struct CropSpec {
  int offset_y = 0;
  int offset_x = 0;
  int size = 0;

  bool operator==(const CropSpec&) const = default;
};

struct CropTarget {
  CropSpec spec;
  GuidanceImage image;  // I'
  FeatureMap target;    // e(I')
};

/// One training image with its low-res features and crop supervision. All
/// crops of an image share a single upsampler forward pass.
struct TrainingExample {
  GuidanceImage image;  // I, S x S
  FeatureMap features;  // p = e(resize(I -> crop size))
  int patch_size = 0;
  std::vector<CropTarget> crops;

  /// Grid the prediction q is produced on: one cell per P x P image patch.
  int grid_height() const { return image.height / patch_size; }
  int grid_width() const { return image.width / patch_size; }
};

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
};

/// Adam moments and the number of updates taken so far.
struct OptimizerState {
  ParamSet m, v;
  std::int64_t step = 0;

  static OptimizerState zeros_like(const ParamSet& params);
};

struct TrainConfig {
  double learning_rate = 2e-4;
  int batch_size = 4;
  int crops_per_image = 4;
  int total_steps = 2000;
  int image_size = 64;
  int crop_size = 32;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  AdamWParams optimizer;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  int checkpoint_interval = 0;  // 0: final checkpoint only
  EncoderConfig encoder;
  UpsamplerConfig upsampler;
  AugmentationParams augmentation;
  // each drawn image gets a random flip/rotation and RGB channel order
  // before p, I' and q_hat are built from it
  bool source_augmentation = true;

  void validate() const;
};

struct StepOptions {
  double learning_rate = 2e-4;
  AdamWParams optimizer;
  double grad_clip = 1.0;
  LossWeights loss_weights;
  AugmentationParams augmentation;
  std::int64_t step_index = 0;  // for diagnostics
};

struct LossBreakdown {
  double main = 0.0;
  double input = 0.0;
  double self = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;  // before clipping
};

struct LogRow {
  std::int64_t step = 0;
  LossBreakdown loss;
  double wall_ms = 0.0;
};

/// One of the 8 square symmetries (bit 0: flip columns, bit 1: flip rows,
/// bit 2: transpose, applied in that order) followed by one of the 6 RGB
/// channel orders in lexicographic order. (0, 0) is the identity.
GuidanceImage transform_source(const GuidanceImage& image, int symmetry, int channel_order);

/// Uniform over P-aligned offsets with offset + crop_size <= image_size.
CropSpec sample_crop(int image_size, int crop_size, int patch_size, Rng& rng);

/// p = e(resize_bilinear(I -> crop size)), I' = pixel crop, q_hat = e(I').
TrainingExample build_training_example(const GuidanceImage& image, const ToyEncoder& encoder,
                                       std::span<const CropSpec> crops);
TrainingExample build_training_example(const GuidanceImage& image, const ToyEncoder& encoder, const CropSpec& crop);

/// Slice of q matching a pixel crop: rows/cols [offset/(P*ratio), +size/(P*ratio)).
FeatureMap extract_crop_features(const FeatureMap& q, const CropSpec& crop, int patch_size, int downsample_ratio = 1);
Grid extract_crop_features(const Grid& q, const CropSpec& crop, int patch_size, int downsample_ratio = 1);

/// One AdamW step on the weighted loss averaged over the batch. aug_seeds
/// holds one augmentation seed per example. Throws Numerical when a loss
/// term is not finite; the weights are left untouched in that case.
LossBreakdown train_step(UpsamplerWeights& weights, std::span<const TrainingExample> batch,
                         std::span<const std::uint64_t> aug_seeds, OptimizerState& state, const StepOptions& options);

/// Loss and gradients without an update; exposed for gradient checks.
LossBreakdown compute_loss_and_gradients(const UpsamplerWeights& weights, std::span<const TrainingExample> batch,
                                         std::span<const std::uint64_t> aug_seeds, const LossWeights& loss_weights,
                                         const AugmentationParams& augmentation, ParamSet* grads);

/// Procedural scene: a two-colour gradient background overlaid with random
/// filled polygons. Depth follows the background ramp; each polygon sits at
/// its own constant depth.
struct SyntheticScene {
  GuidanceImage image;
  std::vector<float> depth;  // size x size, row-major
};

SyntheticScene synthetic_scene(int size, std::uint64_t seed);
GuidanceImage synthetic_image(int size, std::uint64_t seed);
std::vector<GuidanceImage> synthetic_dataset(int count, int size, std::uint64_t seed);

/// Decodes PNGs, resizing to size x size. Unreadable files are reported via
/// warn and skipped; throws Validation when none can be read.
std::vector<GuidanceImage> load_dataset(std::span<const std::filesystem::path> paths, int size,
                                        const std::function<void(const std::string&)>& warn = {});

struct Checkpoint {
  UpsamplerWeights weights;
  OptimizerState optimizer;
  std::int64_t step = 0;
  std::optional<TrainConfig> train_config;
};

inline constexpr int kCheckpointVersion = 1;

/// Directory with manifest.json plus one ANYT file per tensor.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const LogRow&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRow> log;
};

/// Each step draws its images, crops and augmentation seeds from a generator
/// seeded by (config.seed, step), so a resumed run reproduces the
/// uninterrupted trajectory.
TrainResult train(const TrainConfig& config, std::span<const GuidanceImage> dataset, const TrainOptions& options = {});

void write_log_csv(std::span<const LogRow> log, const std::filesystem::path& path);

}  // namespace anyup
