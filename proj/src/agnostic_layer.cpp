#include "anyup/agnostic_layer.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "anyup/rng.hpp"

namespace anyup {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

void check(const Grid& features, std::span<const double> filters, int count, int k) {
  require(features.height > 0 && features.width > 0, ErrorKind::Shape, "agnostic_conv needs a non-empty spatial extent");
  require(features.channels > 0, ErrorKind::Shape, "agnostic_conv needs at least one input channel");
  require(count > 0 && k > 0 && k % 2 == 1, ErrorKind::Validation, "kernel basis needs M >= 1 and odd k");
  require(filters.size() == std::size_t(count) * k * k, ErrorKind::Shape, "kernel basis size mismatch");
}

// Patches of one image row: rows are (x, channel) pairs, columns the k*k taps.
void gather_row(const Grid& f, int y, int k, RowMatrix& patches) {
  const int r = k / 2, N = f.channels;
  patches.setZero(std::size_t(f.width) * N, k * k);
  for (int x = 0; x < f.width; ++x)
    for (int dy = 0; dy < k; ++dy) {
      const int sy = y + dy - r;
      if (sy < 0 || sy >= f.height) continue;
      for (int dx = 0; dx < k; ++dx) {
        const int sx = x + dx - r;
        if (sx < 0 || sx >= f.width) continue;
        const double* src = f.data.data() + f.offset(sy, sx);
        for (int i = 0; i < N; ++i) patches(x * N + i, dy * k + dx) = src[i];
      }
    }
}

// Scalar on purpose: Eigen's vectorized exp and sums peel an alignment-
// dependent head, which makes results vary with heap addresses.
void softmax_rows(RowMatrix& m) {
  for (Eigen::Index row = 0; row < m.rows(); ++row) {
    double* v = m.data() + row * m.cols();
    double mx = v[0], z = 0.0;
    for (Eigen::Index j = 1; j < m.cols(); ++j) mx = std::max(mx, v[j]);
    for (Eigen::Index j = 0; j < m.cols(); ++j) z += (v[j] = std::exp(v[j] - mx));
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[j] /= z;
  }
}

}  // namespace

KernelBasis KernelBasis::random(int count, int kernel_size, std::uint64_t seed) {
  KernelBasis b{count, kernel_size, {}};
  require(count > 0 && kernel_size > 0 && kernel_size % 2 == 1, ErrorKind::Validation,
          "kernel basis needs M >= 1 and odd k");
  Rng rng(seed);
  const double bound = 1.0 / kernel_size;
  b.filters.resize(std::size_t(count) * kernel_size * kernel_size);
  for (double& v : b.filters) v = rng.uniform(-bound, bound);
  return b;
}

void KernelBasis::validate() const {
  require(count > 0 && kernel_size > 0 && kernel_size % 2 == 1, ErrorKind::Validation,
          "kernel basis needs M >= 1 and odd k");
  require(filters.size() == std::size_t(count) * kernel_size * kernel_size, ErrorKind::Validation,
          "kernel basis size mismatch");
  for (double v : filters) require(std::isfinite(v), ErrorKind::Validation, "kernel basis contains a non-finite value");
}

Grid agnostic_conv(const Grid& features, std::span<const double> filters, int count, int k) {
  check(features, filters, count, k);
  const int N = features.channels;
  const ConstMap psi(filters.data(), count, k * k);
  Grid out(features.height, features.width, count);
  RowMatrix patches, responses;
  for (int y = 0; y < features.height; ++y) {
    gather_row(features, y, k, patches);
    responses.noalias() = patches * psi.transpose();
    softmax_rows(responses);
    for (int x = 0; x < features.width; ++x) {
      double* dst = out.data.data() + out.offset(y, x);
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < count; ++j) dst[j] += responses(x * N + i, j);
      for (int j = 0; j < count; ++j) dst[j] /= N;
    }
  }
  return out;
}

FeatureMap agnostic_conv(const FeatureMap& features, const KernelBasis& basis) {
  basis.validate();
  return to_feature_map(agnostic_conv(to_grid(features), basis.filters, basis.count, basis.kernel_size));
}

void agnostic_conv_backward(const Grid& features, std::span<const double> filters, int count, int k,
                            const Grid& grad_out, std::span<double> grad_filters) {
  check(features, filters, count, k);
  require(grad_out.height == features.height && grad_out.width == features.width && grad_out.channels == count,
          ErrorKind::Shape, "agnostic_conv gradient shape mismatch");
  require(grad_filters.size() == filters.size(), ErrorKind::Shape, "agnostic_conv gradient buffer mismatch");
  const int N = features.channels;
  const ConstMap psi(filters.data(), count, k * k);
  Eigen::Map<RowMatrix> grad_psi(grad_filters.data(), count, k * k);
  RowMatrix patches, s;
  for (int y = 0; y < features.height; ++y) {
    gather_row(features, y, k, patches);
    s.noalias() = patches * psi.transpose();
    softmax_rows(s);
    // d response_j = s_j (g_j - sum_j' s_j' g_j') / N
    for (int x = 0; x < features.width; ++x) {
      const double* g = grad_out.data.data() + grad_out.offset(y, x);
      for (int i = 0; i < N; ++i) {
        auto row = s.row(x * N + i);
        double dot = 0.0;
        for (int j = 0; j < count; ++j) dot += row(j) * g[j];
        for (int j = 0; j < count; ++j) row(j) = row(j) * (g[j] - dot) / N;
      }
    }
    grad_psi.noalias() += s.transpose() * patches;
  }
}

}  // namespace anyup
