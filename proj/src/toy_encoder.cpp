#include "anyup/toy_encoder.hpp"

#include <cmath>

#include "anyup/feature_io.hpp"
#include "anyup/rng.hpp"

namespace anyup {

void EncoderConfig::validate() const {
  require(patch_size >= 1, ErrorKind::Validation, "patch_size must be >= 1");
  require(feature_dim >= 1, ErrorKind::Validation, "feature_dim must be >= 1");
  require(hidden_dim >= 1, ErrorKind::Validation, "hidden_dim must be >= 1");
}

ToyEncoder::ToyEncoder(const EncoderConfig& config) : config_(config) {
  config_.validate();
  const int fan_in = 3 * config.patch_size * config.patch_size;
  Rng rng(mix_seed(config.seed, 0x656e636fULL));
  auto fill = [&rng](std::vector<double>& v, std::size_t n, int fan) {
    const double bound = 1.0 / std::sqrt(double(fan));
    v.resize(n);
    for (double& x : v) x = rng.uniform(-bound, bound);
  };
  fill(w1_, std::size_t(config.hidden_dim) * fan_in, fan_in);
  fill(b1_, std::size_t(config.hidden_dim), fan_in);
  fill(w2_, std::size_t(config.feature_dim) * config.hidden_dim, config.hidden_dim);
  fill(b2_, std::size_t(config.feature_dim), config.hidden_dim);
}

void ToyEncoder::encode_window(const GuidanceImage& image, int y0, int x0, float* out) const {
  const int P = config_.patch_size;
  const int fan_in = 3 * P * P;
  std::vector<double> x(fan_in);
  for (int dy = 0; dy < P; ++dy)
    for (int dx = 0; dx < P; ++dx)
      for (int c = 0; c < 3; ++c) x[(dy * P + dx) * 3 + c] = 2.0 * image.at(y0 + dy, x0 + dx, c) - 1.0;

  std::vector<double> hidden(config_.hidden_dim);
  for (int j = 0; j < config_.hidden_dim; ++j) {
    const double* w = w1_.data() + std::size_t(j) * fan_in;
    double s = b1_[j];
    for (int i = 0; i < fan_in; ++i) s += w[i] * x[i];
    hidden[j] = std::tanh(s);
  }
  for (int k = 0; k < config_.feature_dim; ++k) {
    const double* w = w2_.data() + std::size_t(k) * config_.hidden_dim;
    double s = b2_[k];
    for (int j = 0; j < config_.hidden_dim; ++j) s += w[j] * hidden[j];
    out[k] = static_cast<float>(std::tanh(s));
  }
}

FeatureMap ToyEncoder::encode(const GuidanceImage& image) const {
  const int P = config_.patch_size;
  require(image.channels == 3 && image.height > 0 && image.width > 0, ErrorKind::Shape, "encode expects an HxWx3 image");
  require(image.height % P == 0 && image.width % P == 0, ErrorKind::Shape,
          "image " + image.shape_string() + " is not divisible by patch size " + std::to_string(P));
  return encode_dense(image, P);
}

FeatureMap ToyEncoder::encode_dense(const GuidanceImage& image, int stride) const {
  const int P = config_.patch_size;
  require(image.channels == 3, ErrorKind::Shape, "encode expects an HxWx3 image");
  require(stride >= 1, ErrorKind::Shape, "stride must be >= 1");
  require(image.height >= P && image.width >= P, ErrorKind::Shape, "image smaller than one patch");
  require((image.height - P) % stride == 0 && (image.width - P) % stride == 0, ErrorKind::Shape,
          "stride " + std::to_string(stride) + " does not divide (H - P) and (W - P)");
  const int rows = (image.height - P) / stride + 1;
  const int cols = (image.width - P) / stride + 1;
  FeatureMap out(rows, cols, config_.feature_dim);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) encode_window(image, i * stride, j * stride, out.data.data() + out.offset(i, j));
  return out;
}

FeatureMap encode(const GuidanceImage& image, const EncoderConfig& config) { return ToyEncoder(config).encode(image); }

FeatureMap encode_dense(const GuidanceImage& image, const EncoderConfig& config, int stride) {
  return ToyEncoder(config).encode_dense(image, stride);
}

FeatureMap import_external_features(const std::filesystem::path& path) { return read_feature_map(path); }

}  // namespace anyup
