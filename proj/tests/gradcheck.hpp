#pragma once

// Central-difference check of the end-to-end training gradients.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "anyup/training.hpp"

namespace testing {

struct GroupError {
  std::string name;
  double relative_error = 0.0;
  double analytic_norm = 0.0;
  std::size_t checked = 0;
};

/// 16x16 guidance, 2x2 input features (P = 4, crop 8), all three loss terms.
inline anyup::TrainingExample gradcheck_example(std::uint64_t seed) {
  anyup::EncoderConfig enc;
  enc.patch_size = 4;
  enc.feature_dim = 6;
  enc.hidden_dim = 8;
  enc.seed = seed;
  const anyup::ToyEncoder encoder(enc);
  const anyup::GuidanceImage image = anyup::synthetic_image(16, seed);
  const anyup::CropSpec crops[] = {{4, 8, 8}, {0, 0, 8}};
  return anyup::build_training_example(image, encoder, crops);
}

/// Per-tensor norm-wise relative error between analytic and numeric
/// gradients over up to max_entries evenly spread entries. The denominator
/// has an absolute floor so groups with an exactly zero gradient (key biases
/// shift every logit of a window equally) are compared absolutely.
inline std::vector<GroupError> gradient_check(const anyup::UpsamplerWeights& weights,
                                              const anyup::TrainingExample& example, double eps = 1e-4,
                                              std::size_t max_entries = 40) {
  using namespace anyup;
  const LossWeights lw{1.0, 0.1, 0.1};
  const AugmentationParams aug;
  const std::uint64_t seeds[] = {17};
  const std::span<const TrainingExample> batch(&example, 1);

  ParamSet grads = weights.params.zeros_like();
  compute_loss_and_gradients(weights, batch, seeds, lw, aug, &grads);

  std::vector<GroupError> out;
  UpsamplerWeights probe = weights;
  for (std::size_t t = 0; t < probe.params.size(); ++t) {
    auto& values = probe.params[t].values;
    const std::size_t n = values.size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_entries);
    double diff = 0.0, na = 0.0, nn = 0.0;
    std::size_t checked = 0;
    for (std::size_t i = 0; i < n && checked < max_entries; i += stride, ++checked) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = compute_loss_and_gradients(probe, batch, seeds, lw, aug, nullptr).total;
      values[i] = saved - eps;
      const double down = compute_loss_and_gradients(probe, batch, seeds, lw, aug, nullptr).total;
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = grads[t].values[i];
      diff += (numeric - analytic) * (numeric - analytic);
      na += analytic * analytic;
      nn += numeric * numeric;
    }
    const double scale = std::max(std::sqrt(std::max(na, nn)), 1e-6);
    out.push_back({probe.params[t].name, std::sqrt(diff) / scale, std::sqrt(na), checked});
  }
  return out;
}

}  // namespace testing
