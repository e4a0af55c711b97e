#pragma once

#include <cstdint>
#include <functional>

#include "anyup/tensor.hpp"

namespace anyup {

struct LossWeights {
  double main = 1.0;
  double input = 0.1;
  double self = 0.1;

  /// Throws Validation on a negative or non-finite weight, or all zero.
  void validate() const;
};

struct LossParts {
  double main = 0.0;
  double input = 0.0;
  double self = 0.0;
};

/// Mean over locations of (1 - cosine over channels) plus the mean squared
/// error over all elements. A location where either vector has zero norm
/// contributes a cosine distance of exactly 1 (and no cosine gradient).
double cos_mse(const FeatureMap& a, const FeatureMap& b);
/// Double-precision form; overwrites the non-null gradients dL/da, dL/db.
double cos_mse(const Grid& a, const Grid& b, Grid* grad_a = nullptr, Grid* grad_b = nullptr);

/// cos_mse between q area-pooled onto p's grid and p.
double input_consistency(const FeatureMap& q, const FeatureMap& p);
double input_consistency(const Grid& q, const Grid& p, Grid* grad_q = nullptr);

/// Probabilities and ranges of the photometric augmentations. Each operation
/// is applied independently with its probability, in the fixed order
/// brightness, contrast, grayscale, blur, noise; the result is clamped to [0, 1].
struct AugmentationParams {
  double p_brightness = 0.5;
  double brightness_min = 0.7, brightness_max = 1.3;
  double p_contrast = 0.5;
  double contrast_min = 0.7, contrast_max = 1.3;
  double p_grayscale = 0.1;
  double p_blur = 0.5;
  double blur_sigma_max = 1.5;
  double p_noise = 0.5;
  double noise_sigma_max = 0.08;

  static AugmentationParams none();
};

GuidanceImage apply_augmentation(const GuidanceImage& image, std::uint64_t seed,
                                 const AugmentationParams& params = {});

using UpsampleFn = std::function<FeatureMap(const FeatureMap& features, const GuidanceImage& image)>;

/// cos_mse between upsampling under the clean and the augmented guidance.
double self_consistency(const UpsampleFn& upsample, const FeatureMap& features, const GuidanceImage& image,
                        std::uint64_t seed, const AugmentationParams& params = {});

double total_loss(const LossParts& parts, const LossWeights& weights);

}  // namespace anyup
