#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "anyup/nn.hpp"
#include "anyup/tensor.hpp"

namespace anyup {

struct UpsamplerConfig {
  int query_dim = 64;
  int key_dim = 64;
  int num_res_blocks = 2;
  int window_radius = 1;  // window = (2r+1)^2 low-res cells
  int pos_enc_frequencies = 4;
  int agnostic_M = 32;
  int agnostic_k = 3;
  int image_dim = 16;  // width of the convolutional image paths
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const UpsamplerConfig&) const = default;
};

/// All trainable tensors of the upsampler, plus the config that shapes them.
struct UpsamplerWeights {
  UpsamplerConfig config;
  ParamSet params;

  /// Names and shapes for a config, all zero.
  static ParamSet layout(const UpsamplerConfig& config);
  /// Seeded initialization: conv/projection weights and biases uniform in
  /// +-1/sqrt(fan_in), the kernel basis uniform in +-1/k.
  static UpsamplerWeights initialize(const UpsamplerConfig& config);

  void validate() const;
};

FeatureMap positional_encoding(int h, int w, int frequencies);

/// Per-pixel queries from the guidance image: conv stem with residual blocks,
/// positional encoding concatenated, 1x1 projection to query_dim.
FeatureMap encode_queries(const GuidanceImage& image, const UpsamplerWeights& weights);

/// Per-cell keys from the image downsampled to the feature grid and the
/// canonicalized features (agnostic_conv), fused by a residual conv block.
FeatureMap encode_keys(const GuidanceImage& image_lr, const FeatureMap& features, const UpsamplerWeights& weights);

/// Half-open window of low-res cells attended by output pixel (u, v).
struct AttentionWindow {
  int y0, y1, x0, x1;
  int cells() const noexcept { return (y1 - y0) * (x1 - x0); }
};

/// Centre is the nearest low-res cell under the resize coordinate convention;
/// the window is clipped to the grid rather than padded.
AttentionWindow attention_window(int u, int v, int out_h, int out_w, int in_h, int in_w, int radius);

/// Softmax weights of output pixel (u, v) over its window, row-major.
std::vector<double> attention_weights(const Grid& queries, const Grid& keys, int radius, int u, int v);

Grid window_attention(const Grid& queries, const Grid& keys, const Grid& values, int radius);
FeatureMap window_attention(const FeatureMap& queries, const FeatureMap& keys, const FeatureMap& values, int radius);

/// Accumulates into the non-null gradient grids (allocated on first use).
void window_attention_backward(const Grid& queries, const Grid& keys, const Grid& values, int radius,
                               const Grid& grad_out, Grid* grad_queries, Grid* grad_keys, Grid* grad_values);

/// Upsamples p to the guidance image resolution. Output channels equal the
/// input channels for any channel count.
FeatureMap upsample(const UpsamplerWeights& weights, const GuidanceImage& image, const FeatureMap& features);
/// Same, to an explicit output grid. Pixel queries are area-pooled onto it.
FeatureMap upsample(const UpsamplerWeights& weights, const GuidanceImage& image, const FeatureMap& features,
                    int out_h, int out_w);

/// Recorded activations of one forward pass, sufficient for backward().
struct BlockTrace {
  Grid input, act1, hidden, act2;
};

struct StemTrace {
  Grid input;
  std::vector<BlockTrace> blocks;
  Grid output;
};

struct ForwardPass {
  Grid features;
  StemTrace query_stem;
  Grid query_concat;
  Grid queries;  // full image resolution
  Grid agnostic;
  StemTrace key_stem;
  Grid key_concat;
  Grid fuse_input;
  StemTrace fuse_stem;
  Grid keys;
  std::vector<std::pair<int, int>> output_sizes;
  std::vector<Grid> pooled_queries;
  std::vector<Grid> outputs;
};

/// Differentiable forward producing one output per requested grid size; the
/// query and key paths are shared between outputs.
ForwardPass forward(const UpsamplerWeights& weights, const GuidanceImage& image, const Grid& features,
                    std::span<const std::pair<int, int>> output_sizes);

/// Accumulates parameter gradients for the given output gradients (an empty
/// grid skips that output).
void backward(const UpsamplerWeights& weights, const ForwardPass& pass, std::span<const Grid> grad_outputs,
              ParamSet& grads);

}  // namespace anyup
