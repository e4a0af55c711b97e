#include "anyup/eval_probe.hpp"

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "anyup/feature_io.hpp"
#include "anyup/rng.hpp"
#include "anyup/training.hpp"

namespace anyup {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Stacks the feature vectors of all pixels; rows follow map order.
RowMatrix stack(std::span<const FeatureMap> features) {
  std::size_t rows = 0;
  for (const auto& f : features) rows += f.pixels();
  const int c = features.front().channels;
  RowMatrix x(rows, c);
  std::size_t r = 0;
  for (const auto& f : features) {
    require(f.channels == c, ErrorKind::Shape, "probe features differ in channel count");
    for (std::size_t i = 0; i < f.pixels(); ++i, ++r)
      for (int k = 0; k < c; ++k) x(r, k) = f.data[i * c + k];
  }
  return x;
}

template <typename Labels>
void check_pairs(std::span<const FeatureMap> features, std::span<const Labels> labels) {
  require(!features.empty(), ErrorKind::Validation, "probe fitting needs at least one feature map");
  require(features.size() == labels.size(), ErrorKind::Validation, "one label map per feature map expected");
  for (std::size_t i = 0; i < features.size(); ++i)
    require(features[i].height == labels[i].height && features[i].width == labels[i].width, ErrorKind::Shape,
            "label map " + std::to_string(i) + " does not match its features");
}

// Full-batch Adam over (W, b) for a loss whose gradient w.r.t. the logits
// is produced by grad_logits.
template <typename GradFn>
void adam_fit(ProbeWeights& probe, const RowMatrix& x, const ProbeParams& params, GradFn grad_logits) {
  Eigen::Map<RowMatrix> w(probe.matrix.data(), probe.in_dim, probe.out_dim);
  Eigen::Map<Eigen::RowVectorXd> b(probe.bias.data(), probe.out_dim);
  RowMatrix mw = RowMatrix::Zero(probe.in_dim, probe.out_dim), vw = mw;
  Eigen::RowVectorXd mb = Eigen::RowVectorXd::Zero(probe.out_dim), vb = mb;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  RowMatrix logits, g;
  for (int step = 1; step <= params.steps; ++step) {
    logits = x * w;
    logits.rowwise() += b;
    grad_logits(logits, g);
    const RowMatrix gw = x.transpose() * g;
    const Eigen::RowVectorXd gb = g.colwise().sum();
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
    const double c1 = 1 - std::pow(b1, step), c2 = 1 - std::pow(b2, step);
    w.array() -= params.learning_rate * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
    b.array() -= params.learning_rate * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
  }
}

RowMatrix logits_of(const ProbeWeights& probe, const FeatureMap& f) {
  require(f.channels == probe.in_dim, ErrorKind::Shape,
          "probe expects " + std::to_string(probe.in_dim) + " channels, features have " + std::to_string(f.channels));
  const FeatureMap* one = &f;
  RowMatrix x = stack(std::span(one, 1));
  RowMatrix z = x * Eigen::Map<const RowMatrix>(probe.matrix.data(), probe.in_dim, probe.out_dim);
  z.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(probe.bias.data(), probe.out_dim);
  return z;
}

void check_same(int h0, int w0, int h1, int w1) {
  require(h0 == h1 && w0 == w1, ErrorKind::Shape, "prediction and ground truth differ in shape");
}

}  // namespace

const char* to_string(ProbeTask task) noexcept {
  return task == ProbeTask::Segmentation ? "segmentation" : "depth";
}

ProbeWeights ProbeWeights::initialize(ProbeTask task, int in_dim, int out_dim, std::uint64_t seed) {
  require(in_dim >= 1 && out_dim >= 1, ErrorKind::Validation, "probe dimensions must be positive");
  ProbeWeights p{task, in_dim, out_dim, std::vector<double>(std::size_t(in_dim) * out_dim), std::vector<double>(out_dim)};
  Rng rng(mix_seed(seed, 0x70726f62ULL));
  const double bound = 1.0 / std::sqrt(double(in_dim));
  for (double& v : p.matrix) v = rng.uniform(-bound, bound);
  return p;
}

ProbeWeights fit_linear_probe(std::span<const FeatureMap> features, std::span<const ClassMap> labels, int num_classes,
                              const ProbeParams& params) {
  check_pairs(features, labels);
  require(num_classes >= 1, ErrorKind::Validation, "num_classes must be >= 1");
  require(params.steps >= 0, ErrorKind::Validation, "probe steps must be >= 0");
  const RowMatrix x = stack(features);
  std::vector<int> y;
  for (const auto& l : labels) y.insert(y.end(), l.labels.begin(), l.labels.end());
  std::size_t valid = 0;
  for (int v : y) {
    if (v == kIgnoreIndex) continue;
    require(v >= 0 && v < num_classes, ErrorKind::Validation, "class label out of range: " + std::to_string(v));
    ++valid;
  }
  require(valid > 0, ErrorKind::Validation, "every label is ignored");

  ProbeWeights probe = ProbeWeights::initialize(ProbeTask::Segmentation, int(x.cols()), num_classes, params.seed);
  adam_fit(probe, x, params, [&](const RowMatrix& z, RowMatrix& g) {
    g.setZero(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      if (y[r] == kIgnoreIndex) continue;
      const double mx = z.row(r).maxCoeff();
      double total = 0.0;
      for (Eigen::Index k = 0; k < z.cols(); ++k) total += g(r, k) = std::exp(z(r, k) - mx);
      for (Eigen::Index k = 0; k < z.cols(); ++k) g(r, k) /= total;
      g(r, y[r]) -= 1.0;
    }
    g /= double(valid);
  });
  return probe;
}

ProbeWeights fit_linear_probe(std::span<const FeatureMap> features, std::span<const DepthMap> depth,
                              const ProbeParams& params) {
  check_pairs(features, depth);
  require(params.steps >= 0, ErrorKind::Validation, "probe steps must be >= 0");
  const RowMatrix x = stack(features);
  std::vector<double> y;
  for (const auto& d : depth)
    for (float v : d.values) {
      require(std::isfinite(v) && v > 0.0f, ErrorKind::Validation, "depth labels must be positive");
      y.push_back(v);
    }
  ProbeWeights probe = ProbeWeights::initialize(ProbeTask::Depth, int(x.cols()), 1, params.seed);
  adam_fit(probe, x, params, [&](const RowMatrix& z, RowMatrix& g) {
    g.resize(z.rows(), 1);
    for (Eigen::Index r = 0; r < z.rows(); ++r)
      g(r, 0) = 2.0 * (softplus(z(r, 0)) - y[r]) * sigmoid(z(r, 0)) / double(z.rows());
  });
  return probe;
}

ClassMap predict_classes(const ProbeWeights& probe, const FeatureMap& features) {
  require(probe.task == ProbeTask::Segmentation, ErrorKind::Validation, "not a segmentation probe");
  const RowMatrix z = logits_of(probe, features);
  ClassMap out{features.height, features.width, std::vector<int>(features.pixels())};
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    Eigen::Index best;
    z.row(r).maxCoeff(&best);
    out.labels[r] = int(best);
  }
  return out;
}

DepthMap predict_depth(const ProbeWeights& probe, const FeatureMap& features) {
  require(probe.task == ProbeTask::Depth, ErrorKind::Validation, "not a depth probe");
  const RowMatrix z = logits_of(probe, features);
  DepthMap out{features.height, features.width, std::vector<float>(features.pixels())};
  for (Eigen::Index r = 0; r < z.rows(); ++r) out.values[r] = float(softplus(z(r, 0)));
  return out;
}

namespace {

struct ClassCounts {
  std::vector<double> intersection, uni, present;
  double correct = 0, total = 0;

  explicit ClassCounts(int n) : intersection(n), uni(n), present(n) {}

  void add(const ClassMap& pred, const ClassMap& gt, int ignore) {
    check_same(pred.height, pred.width, gt.height, gt.width);
    const int n = int(intersection.size());
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      const int g = gt.labels[i], p = pred.labels[i];
      if (g == ignore) continue;
      require(g >= 0 && g < n, ErrorKind::Validation, "ground-truth class out of range");
      ++total;
      present[g] = 1;
      if (p == g) {
        ++correct;
        ++intersection[g];
        ++uni[g];
      } else {
        ++uni[g];
        if (p >= 0 && p < n) ++uni[p];
      }
    }
  }

  double miou() const {
    double sum = 0;
    int classes = 0;
    for (std::size_t k = 0; k < present.size(); ++k)
      if (present[k] > 0) {
        sum += intersection[k] / uni[k];
        ++classes;
      }
    require(classes > 0, ErrorKind::Validation, "mIoU undefined: every pixel is ignored");
    return sum / classes;
  }
};

}  // namespace

double miou(const ClassMap& pred, const ClassMap& gt, int num_classes, int ignore_index) {
  require(num_classes >= 1, ErrorKind::Validation, "num_classes must be >= 1");
  ClassCounts counts(num_classes);
  counts.add(pred, gt, ignore_index);
  return counts.miou();
}

double pixel_accuracy(const ClassMap& pred, const ClassMap& gt, int ignore_index) {
  check_same(pred.height, pred.width, gt.height, gt.width);
  double correct = 0, total = 0;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    if (gt.labels[i] == ignore_index) continue;
    ++total;
    if (pred.labels[i] == gt.labels[i]) ++correct;
  }
  require(total > 0, ErrorKind::Validation, "accuracy undefined: every pixel is ignored");
  return correct / total;
}

namespace {

struct DepthAlignment {
  double scale = 1.0, shift = 0.0;
  bool scale_only = false;
};

DepthAlignment align_depth(const DepthMap& pred, const DepthMap& gt) {
  const double n = double(pred.values.size());
  double sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    sp += pred.values[i];
    sg += gt.values[i];
  }
  const double mp = sp / n, mg = sg / n;
  double var = 0, cov = 0, pp = 0, pg = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double dp = pred.values[i] - mp, dg = gt.values[i] - mg;
    var += dp * dp;
    cov += dp * dg;
    pp += double(pred.values[i]) * pred.values[i];
    pg += double(pred.values[i]) * gt.values[i];
  }
  if (var > 1e-12 * std::max(1.0, pp)) return {cov / var, mg - cov / var * mp, false};
  // constant prediction: fit the scale alone
  return {pp > 0 ? pg / pp : 1.0, 0.0, true};
}

}  // namespace

DepthMetrics depth_metrics(const DepthMap& pred, const DepthMap& gt, DepthMode mode) {
  check_same(pred.height, pred.width, gt.height, gt.width);
  require(!gt.values.empty(), ErrorKind::Validation, "empty depth maps");
  DepthMetrics m;
  if (mode == DepthMode::Relative) {
    const DepthAlignment a = align_depth(pred, gt);
    m.scale = a.scale;
    m.shift = a.shift;
    m.scale_only = a.scale_only;
  }
  double sq = 0, good = 0;
  for (std::size_t i = 0; i < gt.values.size(); ++i) {
    const double g = gt.values[i];
    require(g > 0.0, ErrorKind::Validation, "ground-truth depth must be positive");
    const double p = m.scale * pred.values[i] + m.shift;
    sq += (p - g) * (p - g);
    if (p > 0.0 && std::max(p / g, g / p) < 1.25) ++good;
  }
  m.rmse = std::sqrt(sq / double(gt.values.size()));
  m.delta1 = good / double(gt.values.size());
  return m;
}

double MetricReport::get(const std::string& name) const {
  for (const auto& [k, v] : metrics)
    if (k == name) return v;
  fail(ErrorKind::Validation, "report has no metric " + name);
}

void MetricReport::set(const std::string& name, double value) {
  for (auto& [k, v] : metrics)
    if (k == name) {
      v = value;
      return;
    }
  metrics.emplace_back(name, value);
}

std::string MetricReport::to_text() const {
  std::ostringstream out;
  out.precision(10);
  out << "task=" << task << '\n';
  for (const auto& [k, v] : metrics) out << k << '=' << v << '\n';
  return out.str();
}

void MetricReport::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  require(bool(out), ErrorKind::Io, "cannot write " + path.string());
  out << to_text();
  require(bool(out), ErrorKind::Io, "write failed for " + path.string());
}

MetricReport evaluate_upsampler(const FeatureUpsampler& upsampler, const ProbeWeights& probe,
                                std::span<const EvalSample> dataset, int out_h, int out_w, int num_classes,
                                DepthMode depth_mode) {
  require(!dataset.empty(), ErrorKind::Validation, "evaluation dataset is empty");
  MetricReport report;
  report.task = to_string(probe.task);
  if (probe.task == ProbeTask::Segmentation) {
    if (num_classes <= 0) num_classes = probe.out_dim;
    ClassCounts counts(num_classes);
    for (const auto& s : dataset) {
      require(s.features.channels == probe.in_dim, ErrorKind::Shape, "probe and feature dimensions differ");
      const FeatureMap up = upsampler(s.features, s.image, out_h, out_w);
      counts.add(predict_classes(probe, up), s.classes, kIgnoreIndex);
    }
    report.set("miou", counts.miou());
    require(counts.total > 0, ErrorKind::Validation, "accuracy undefined: every pixel is ignored");
    report.set("accuracy", counts.correct / counts.total);
  } else {
    double sq = 0, good = 0, n = 0, fallbacks = 0;
    for (const auto& s : dataset) {
      require(s.features.channels == probe.in_dim, ErrorKind::Shape, "probe and feature dimensions differ");
      const FeatureMap up = upsampler(s.features, s.image, out_h, out_w);
      const DepthMetrics m = depth_metrics(predict_depth(probe, up), s.depth, depth_mode);
      const double count = double(s.depth.values.size());
      sq += m.rmse * m.rmse * count;
      good += m.delta1 * count;
      n += count;
      fallbacks += m.scale_only ? 1 : 0;
    }
    report.set("rmse", std::sqrt(sq / n));
    report.set("delta1", good / n);
    report.set("scale_only_fallbacks", fallbacks);
  }
  report.set("images", double(dataset.size()));
  return report;
}

namespace {

DepthMap area_depth(const std::vector<float>& depth, int size, int h, int w) {
  Grid g(size, size, 1);
  for (std::size_t i = 0; i < depth.size(); ++i) g.data[i] = depth[i];
  const Grid r = resize_area(g, h, w);
  DepthMap out{h, w, std::vector<float>(r.size())};
  for (std::size_t i = 0; i < r.size(); ++i) out.values[i] = float(r.data[i]);
  return out;
}

}  // namespace

SyntheticProbeSet make_synthetic_probe_set(int count, const EncoderConfig& encoder_config, int image_size, int ratio,
                                           int num_classes, std::uint64_t seed) {
  require(count >= 2, ErrorKind::Validation, "probe set needs at least two images (train and test)");
  require(ratio >= 1 && num_classes >= 2, ErrorKind::Validation, "invalid probe set parameters");
  const ToyEncoder encoder(encoder_config);
  const int P = encoder_config.patch_size;
  require(image_size % (P * ratio) == 0, ErrorKind::Validation, "image size must be a multiple of P * ratio");
  const int hr = image_size / P, lr_pixels = image_size / ratio;

  SyntheticProbeSet set;
  set.num_classes = num_classes;
  set.out_h = set.out_w = hr;
  std::vector<EvalSample> all;
  std::vector<FeatureMap> dense;
  for (int i = 0; i < count; ++i) {
    SyntheticScene scene = synthetic_scene(image_size, mix_seed(seed, std::uint64_t(i)));
    EvalSample s;
    s.features = encoder.encode(resize_bilinear(scene.image, lr_pixels, lr_pixels));
    dense.push_back(encoder.encode(scene.image));
    s.depth = area_depth(scene.depth, image_size, hr, hr);
    s.depth_lowres = area_depth(scene.depth, image_size, s.features.height, s.features.width);
    s.image = std::move(scene.image);
    all.push_back(std::move(s));
  }

  // labels: argmax of a seeded linear map of mean-centred oracle features
  const int c = encoder_config.feature_dim;
  std::vector<double> mean(c, 0.0);
  double cells = 0;
  for (const auto& d : dense)
    for (std::size_t i = 0; i < d.pixels(); ++i, ++cells)
      for (int k = 0; k < c; ++k) mean[k] += d.data[i * c + k];
  for (double& m : mean) m /= cells;
  ProbeWeights rule = ProbeWeights::initialize(ProbeTask::Segmentation, c, num_classes, mix_seed(seed, 0x6c61ULL));
  for (int j = 0; j < num_classes; ++j) {
    double b = 0.0;
    for (int k = 0; k < c; ++k) b -= mean[k] * rule.matrix[std::size_t(k) * num_classes + j];
    rule.bias[j] = b;
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i].classes = predict_classes(rule, dense[i]);
    all[i].classes_lowres = predict_classes(rule, all[i].features);
  }
  set.label_map = rule;
  const std::size_t n_train = all.size() / 2;
  for (std::size_t i = 0; i < all.size(); ++i) (i < n_train ? set.train : set.test).push_back(std::move(all[i]));
  return set;
}

MetricReport run_probe_protocol(const FeatureUpsampler& upsampler, const SyntheticProbeSet& set, ProbeTask task,
                                ProbeProtocol protocol, const ProbeParams& params) {
  require(!set.train.empty() && !set.test.empty(), ErrorKind::Validation, "probe set has an empty split");
  std::vector<FeatureMap> features;
  std::vector<ClassMap> classes;
  std::vector<DepthMap> depth;
  for (const auto& s : set.train) {
    if (protocol == ProbeProtocol::TrainOnUpsampled) {
      features.push_back(upsampler(s.features, s.image, set.out_h, set.out_w));
      classes.push_back(s.classes);
      depth.push_back(s.depth);
    } else {
      features.push_back(s.features);
      classes.push_back(s.classes_lowres);
      depth.push_back(s.depth_lowres);
    }
  }
  const ProbeWeights probe = task == ProbeTask::Segmentation
                                 ? fit_linear_probe(features, classes, set.num_classes, params)
                                 : fit_linear_probe(features, depth, params);
  MetricReport report = evaluate_upsampler(upsampler, probe, set.test, set.out_h, set.out_w, set.num_classes);
  report.set("protocol_pretrained_lowres", protocol == ProbeProtocol::PreTrainedLowRes ? 1.0 : 0.0);
  return report;
}

GuidanceImage pca_rgb(const FeatureMap& features, const FeatureMap* basis_source) {
  const FeatureMap& basis = basis_source ? *basis_source : features;
  require(features.channels >= 3, ErrorKind::Validation, "pca_rgb needs at least 3 channels");
  require(basis.channels == features.channels, ErrorKind::Shape, "PCA basis has a different channel count");
  require(basis.pixels() >= 3, ErrorKind::Validation, "pca_rgb needs at least 3 spatial samples");
  const int c = features.channels;
  const FeatureMap* b = &basis;
  const RowMatrix x = stack(std::span(b, 1));
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const RowMatrix centred = x.rowwise() - mean;
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / double(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  require(eig.info() == Eigen::Success, ErrorKind::Numerical, "PCA eigendecomposition failed");
  // eigenvalues ascend; take the last three
  const double top = std::max(eig.eigenvalues()(c - 1), 0.0);
  const FeatureMap* f = &features;
  const RowMatrix y = stack(std::span(f, 1)).rowwise() - mean;

  GuidanceImage out(features.height, features.width, 0.5f);
  for (int comp = 0; comp < 3; ++comp) {
    const double lambda = eig.eigenvalues()(c - 1 - comp);
    if (!(top > 1e-20) || lambda <= 1e-9 * top) continue;
    Eigen::VectorXd v = eig.eigenvectors().col(c - 1 - comp);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd proj = y * v;
    const double lo = proj.minCoeff(), hi = proj.maxCoeff();
    if (!(hi - lo > 1e-12 * std::sqrt(top))) continue;
    for (Eigen::Index i = 0; i < proj.size(); ++i) out.data[std::size_t(i) * 3 + comp] = float((proj(i) - lo) / (hi - lo));
  }
  return out;
}

}  // namespace anyup
