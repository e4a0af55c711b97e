#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "anyup/tensor.hpp"
#include "anyup/toy_encoder.hpp"

namespace anyup {

inline constexpr int kIgnoreIndex = 255;

struct ClassMap {
  int height = 0, width = 0;
  std::vector<int> labels;
};

struct DepthMap {
  int height = 0, width = 0;
  std::vector<float> values;
};

enum class ProbeTask { Segmentation, Depth };
const char* to_string(ProbeTask task) noexcept;

/// Per-pixel linear head (a 1x1 convolution): logits = f W + b. Depth heads
/// pass the single logit through softplus.
struct ProbeWeights {
  ProbeTask task = ProbeTask::Segmentation;
  int in_dim = 0, out_dim = 0;
  std::vector<double> matrix;  // [in_dim][out_dim]
  std::vector<double> bias;    // [out_dim]

  static ProbeWeights initialize(ProbeTask task, int in_dim, int out_dim, std::uint64_t seed);
};

struct ProbeParams {
  int steps = 500;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
};

/// Full-batch Adam on softmax cross-entropy; ignore-index pixels are skipped.
ProbeWeights fit_linear_probe(std::span<const FeatureMap> features, std::span<const ClassMap> labels, int num_classes,
                              const ProbeParams& params = {});
/// Full-batch Adam on the mean squared error of softplus outputs.
ProbeWeights fit_linear_probe(std::span<const FeatureMap> features, std::span<const DepthMap> depth,
                              const ProbeParams& params = {});

ClassMap predict_classes(const ProbeWeights& probe, const FeatureMap& features);
DepthMap predict_depth(const ProbeWeights& probe, const FeatureMap& features);

/// Mean over classes present in gt of |pred and gt| / |pred or gt|.
double miou(const ClassMap& pred, const ClassMap& gt, int num_classes, int ignore_index = kIgnoreIndex);
double pixel_accuracy(const ClassMap& pred, const ClassMap& gt, int ignore_index = kIgnoreIndex);

enum class DepthMode { Absolute, Relative };

struct DepthMetrics {
  double rmse = 0.0;
  double delta1 = 0.0;
  double scale = 1.0, shift = 0.0;  // alignment applied to pred
  bool scale_only = false;          // relative mode fell back to scale-only
};

/// Relative mode first fits s, t minimizing |s pred + t - gt|^2 in closed form.
DepthMetrics depth_metrics(const DepthMap& pred, const DepthMap& gt, DepthMode mode);

struct MetricReport {
  std::string task;
  std::vector<std::pair<std::string, double>> metrics;

  double get(const std::string& name) const;
  void set(const std::string& name, double value);
  /// Flat "key=value" lines, task first.
  std::string to_text() const;
  void write(const std::filesystem::path& path) const;
};

/// One evaluation image: guidance, low-res input features, and labels both
/// on the high-res target grid and on the low-res feature grid.
struct EvalSample {
  GuidanceImage image;
  FeatureMap features;
  ClassMap classes;
  ClassMap classes_lowres;
  DepthMap depth;
  DepthMap depth_lowres;
};

using FeatureUpsampler =
    std::function<FeatureMap(const FeatureMap& features, const GuidanceImage& image, int out_h, int out_w)>;

/// Upsamples every sample to out_h x out_w, applies the probe per pixel and
/// scores against the high-res labels. Counts are summed over the dataset
/// before the ratios are taken.
MetricReport evaluate_upsampler(const FeatureUpsampler& upsampler, const ProbeWeights& probe,
                                std::span<const EvalSample> dataset, int out_h, int out_w, int num_classes = 0,
                                DepthMode depth_mode = DepthMode::Relative);

/// Synthetic probing benchmark built on the patch-local encoder. Low-res
/// features come from the image downsampled by `ratio`; high-res targets are
/// the stride-P dense oracle. Segmentation labels are the argmax of a fixed
/// seeded linear map of (centred) features; depth is a smooth ramp with
/// constant-depth shapes, area-averaged onto each grid.
struct SyntheticProbeSet {
  std::vector<EvalSample> train, test;
  int num_classes = 0;
  int out_h = 0, out_w = 0;
  ProbeWeights label_map;  // the linear rule that generated the labels
};

SyntheticProbeSet make_synthetic_probe_set(int count, const EncoderConfig& encoder, int image_size, int ratio,
                                           int num_classes, std::uint64_t seed);

enum class ProbeProtocol {
  TrainOnUpsampled,  // probe fit on upsampled train features
  PreTrainedLowRes,  // probe fit on raw low-res features, applied to upsampled
};

MetricReport run_probe_protocol(const FeatureUpsampler& upsampler, const SyntheticProbeSet& set, ProbeTask task,
                                ProbeProtocol protocol, const ProbeParams& params = {});

/// Projects features onto the top three principal components of basis_source
/// (or of the features themselves) and min-max normalizes each channel to
/// [0, 1]. Components with negligible variance map to 0.5. Each component's
/// largest-magnitude loading is made positive.
GuidanceImage pca_rgb(const FeatureMap& features, const FeatureMap* basis_source = nullptr);

}  // namespace anyup
