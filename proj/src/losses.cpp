#include "anyup/losses.hpp"

#include <algorithm>
#include <cmath>

#include "anyup/feature_io.hpp"
#include "anyup/rng.hpp"

namespace anyup {

void LossWeights::validate() const {
  for (double w : {main, input, self})
    require(std::isfinite(w) && w >= 0.0, ErrorKind::Validation, "loss weights must be finite and non-negative");
  require(main > 0.0 || input > 0.0 || self > 0.0, ErrorKind::Validation, "at least one loss weight must be positive");
}

double cos_mse(const Grid& a, const Grid& b, Grid* grad_a, Grid* grad_b) {
  require(a.same_shape(b), ErrorKind::Shape, "cos_mse shape mismatch: " + a.shape_string() + " vs " + b.shape_string());
  require(a.size() > 0, ErrorKind::Shape, "cos_mse of empty maps");
  const std::size_t locations = a.pixels();
  const int c = a.channels;
  const double inv_loc = 1.0 / double(locations);
  const double inv_all = 1.0 / double(a.size());
  if (grad_a) *grad_a = Grid(a.height, a.width, c);
  if (grad_b) *grad_b = Grid(a.height, a.width, c);

  double cos_term = 0.0, sq = 0.0;
  for (std::size_t l = 0; l < locations; ++l) {
    const double* x = a.data.data() + l * c;
    const double* y = b.data.data() + l * c;
    double xy = 0.0, xx = 0.0, yy = 0.0;
    for (int k = 0; k < c; ++k) {
      xy += x[k] * y[k];
      xx += x[k] * x[k];
      yy += y[k] * y[k];
      const double d = x[k] - y[k];
      sq += d * d;
    }
    const bool degenerate = xx == 0.0 || yy == 0.0;
    const double nx = std::sqrt(xx), ny = std::sqrt(yy);
    // sqrt(xx * yy) keeps cos(x, x) exactly 1
    const double cosine = degenerate ? 0.0 : std::clamp(xy / std::sqrt(xx * yy), -1.0, 1.0);
    cos_term += 1.0 - cosine;
    for (int k = 0; k < c; ++k) {
      const double dmse = 2.0 * (x[k] - y[k]) * inv_all;
      if (grad_a) {
        double g = dmse;
        if (!degenerate) g -= inv_loc * (y[k] / (nx * ny) - cosine * x[k] / xx);
        grad_a->data[l * c + k] = g;
      }
      if (grad_b) {
        double g = -dmse;
        if (!degenerate) g -= inv_loc * (x[k] / (nx * ny) - cosine * y[k] / yy);
        grad_b->data[l * c + k] = g;
      }
    }
  }
  return cos_term * inv_loc + sq * inv_all;
}

double cos_mse(const FeatureMap& a, const FeatureMap& b) { return cos_mse(to_grid(a), to_grid(b)); }

double input_consistency(const Grid& q, const Grid& p, Grid* grad_q) {
  require(q.channels == p.channels, ErrorKind::Shape,
          "input_consistency channel mismatch: " + std::to_string(q.channels) + " vs " + std::to_string(p.channels));
  const Grid pooled = resize_area(q, p.height, p.width);
  Grid g_pooled;
  const double loss = cos_mse(pooled, p, grad_q ? &g_pooled : nullptr, nullptr);
  if (grad_q) *grad_q = resize_area_adjoint(g_pooled, q.height, q.width);
  return loss;
}

double input_consistency(const FeatureMap& q, const FeatureMap& p) { return input_consistency(to_grid(q), to_grid(p)); }

AugmentationParams AugmentationParams::none() {
  AugmentationParams p;
  p.p_brightness = p.p_contrast = p.p_grayscale = p.p_blur = p.p_noise = 0.0;
  return p;
}

namespace {

void gaussian_blur(GuidanceImage& img, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& k : kernel) k /= total;

  auto pass = [&](bool vertical) {
    GuidanceImage out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        for (int c = 0; c < 3; ++c) {
          double s = 0.0;
          for (int i = -radius; i <= radius; ++i) {
            const int yy = vertical ? std::clamp(y + i, 0, img.height - 1) : y;
            const int xx = vertical ? x : std::clamp(x + i, 0, img.width - 1);
            s += kernel[i + radius] * img.at(yy, xx, c);
          }
          out.at(y, x, c) = float(s);
        }
    img = std::move(out);
  };
  pass(false);
  pass(true);
}

double luminance(const float* px) { return 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]; }

}  // namespace

GuidanceImage apply_augmentation(const GuidanceImage& image, std::uint64_t seed, const AugmentationParams& params) {
  Rng rng(mix_seed(seed, 0x61756700ULL));
  GuidanceImage out = image;
  auto& d = out.data;

  if (rng.bernoulli(params.p_brightness)) {
    const double s = rng.uniform(params.brightness_min, params.brightness_max);
    for (float& v : d) v = float(v * s);
  }
  if (rng.bernoulli(params.p_contrast)) {
    const double s = rng.uniform(params.contrast_min, params.contrast_max);
    double mean = 0.0;
    for (std::size_t i = 0; i < out.pixels(); ++i) mean += luminance(&d[3 * i]);
    mean /= double(out.pixels());
    for (float& v : d) v = float((v - mean) * s + mean);
  }
  if (rng.bernoulli(params.p_grayscale)) {
    for (std::size_t i = 0; i < out.pixels(); ++i) {
      const float l = float(luminance(&d[3 * i]));
      d[3 * i] = d[3 * i + 1] = d[3 * i + 2] = l;
    }
  }
  if (rng.bernoulli(params.p_blur)) gaussian_blur(out, rng.uniform(0.0, params.blur_sigma_max));
  if (rng.bernoulli(params.p_noise)) {
    const double sigma = rng.uniform(0.0, params.noise_sigma_max);
    for (float& v : d) v = float(v + sigma * rng.normal());
  }
  for (float& v : d) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

double self_consistency(const UpsampleFn& upsample, const FeatureMap& features, const GuidanceImage& image,
                        std::uint64_t seed, const AugmentationParams& params) {
  const FeatureMap clean = upsample(features, image);
  const FeatureMap augmented = upsample(features, apply_augmentation(image, seed, params));
  return cos_mse(clean, augmented);
}

double total_loss(const LossParts& parts, const LossWeights& weights) {
  weights.validate();
  return weights.main * parts.main + weights.input * parts.input + weights.self * parts.self;
}

}  // namespace anyup
