#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "anyup/tensor.hpp"

namespace anyup {

struct EncoderConfig {
  int patch_size = 8;
  int feature_dim = 32;
  int hidden_dim = 64;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

/// Frozen patch-local feature extractor. Every output cell is
/// tanh(W2 tanh(W1 x + b1) + b2) of its own P x P x 3 patch x (pixels mapped
/// to [-1, 1]), with weights drawn uniformly from +-1/sqrt(fan_in). Because
/// nothing crosses patch borders, features of a crop are exactly the matching
/// slice of the dense stride-aligned features of the whole image.
class ToyEncoder {
 public:
  explicit ToyEncoder(const EncoderConfig& config);

  const EncoderConfig& config() const noexcept { return config_; }

  /// Non-overlapping patches: output (H/P) x (W/P) x c.
  FeatureMap encode(const GuidanceImage& image) const;

  /// Patches at every stride-spaced window: ((H-P)/s + 1) x ((W-P)/s + 1) x c.
  FeatureMap encode_dense(const GuidanceImage& image, int stride) const;

  /// Feature vector of the P x P window whose top-left pixel is (y, x).
  void encode_window(const GuidanceImage& image, int y, int x, float* out) const;

 private:
  EncoderConfig config_;
  std::vector<double> w1_, b1_, w2_, b2_;
};

FeatureMap encode(const GuidanceImage& image, const EncoderConfig& config);
FeatureMap encode_dense(const GuidanceImage& image, const EncoderConfig& config, int stride);

/// Loads features produced by any extractor; the channel count is unconstrained.
FeatureMap import_external_features(const std::filesystem::path& path);

}  // namespace anyup
