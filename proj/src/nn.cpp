#include "anyup/nn.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numbers>

namespace anyup {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

void im2col(const Grid& x, int k, RowMatrix& cols) {
  const int r = k / 2, C = x.channels;
  cols.setZero(Eigen::Index(x.pixels()), Eigen::Index(k) * k * C);
  for (int y = 0; y < x.height; ++y)
    for (int xx = 0; xx < x.width; ++xx) {
      double* row = cols.data() + (std::size_t(y) * x.width + xx) * cols.cols();
      for (int dy = 0; dy < k; ++dy) {
        const int sy = y + dy - r;
        if (sy < 0 || sy >= x.height) continue;
        for (int dx = 0; dx < k; ++dx) {
          const int sx = xx + dx - r;
          if (sx < 0 || sx >= x.width) continue;
          std::copy_n(x.data.data() + x.offset(sy, sx), C, row + (dy * k + dx) * C);
        }
      }
    }
}

void col2im(const RowMatrix& cols, int k, Grid& gx) {
  const int r = k / 2, C = gx.channels;
  for (int y = 0; y < gx.height; ++y)
    for (int xx = 0; xx < gx.width; ++xx) {
      const double* row = cols.data() + (std::size_t(y) * gx.width + xx) * cols.cols();
      for (int dy = 0; dy < k; ++dy) {
        const int sy = y + dy - r;
        if (sy < 0 || sy >= gx.height) continue;
        for (int dx = 0; dx < k; ++dx) {
          const int sx = xx + dx - r;
          if (sx < 0 || sx >= gx.width) continue;
          double* dst = gx.data.data() + gx.offset(sy, sx);
          const double* src = row + (dy * k + dx) * C;
          for (int c = 0; c < C; ++c) dst[c] += src[c];
        }
      }
    }
}

}  // namespace

ParamTensor& ParamSet::add(std::string name, std::array<int, 3> shape) {
  require(!contains(name), ErrorKind::Validation, "duplicate parameter " + name);
  ParamTensor t{std::move(name), shape, {}};
  t.values.assign(std::size_t(shape[0]) * shape[1] * shape[2], 0.0);
  tensors_.push_back(std::move(t));
  return tensors_.back();
}

std::size_t ParamSet::index(const std::string& name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (tensors_[i].name == name) return i;
  fail(ErrorKind::Validation, "unknown parameter " + name);
}

bool ParamSet::contains(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return true;
  return false;
}

std::size_t ParamSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  for (const auto& t : tensors_) z.add(t.name, t.shape);
  return z;
}

void ParamSet::set_zero() {
  for (auto& t : tensors_) std::fill(t.values.begin(), t.values.end(), 0.0);
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (other.size() != size()) return false;
  for (std::size_t i = 0; i < size(); ++i)
    if (tensors_[i].name != other[i].name || tensors_[i].shape != other[i].shape) return false;
  return true;
}

Grid silu(const Grid& x) {
  Grid y(x.height, x.width, x.channels);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = silu(x.data[i]);
  return y;
}

Grid conv2d(const Grid& x, std::span<const double> weight, std::span<const double> bias, int out_channels,
            int k) {
  const Eigen::Index taps = Eigen::Index(k) * k * x.channels;
  require(weight.size() == std::size_t(out_channels) * taps, ErrorKind::Shape,
          "conv weight does not match input channels " + std::to_string(x.channels));
  require(bias.size() == std::size_t(out_channels), ErrorKind::Shape, "conv bias size mismatch");
  Grid y(x.height, x.width, out_channels);
  const ConstMap w(weight.data(), out_channels, taps);
  Map out(y.data.data(), Eigen::Index(x.pixels()), out_channels);
  if (k == 1) {
    out.noalias() = ConstMap(x.data.data(), Eigen::Index(x.pixels()), x.channels) * w.transpose();
  } else {
    RowMatrix cols;
    im2col(x, k, cols);
    out.noalias() = cols * w.transpose();
  }
  const Eigen::Map<const Eigen::RowVectorXd> b(bias.data(), out_channels);
  out.rowwise() += b;
  return y;
}

void conv2d_backward(const Grid& x, std::span<const double> weight, int out_channels, int k, const Grid& grad_y,
                     std::span<double> grad_weight, std::span<double> grad_bias, Grid* grad_x) {
  const Eigen::Index taps = Eigen::Index(k) * k * x.channels;
  require(grad_y.height == x.height && grad_y.width == x.width && grad_y.channels == out_channels,
          ErrorKind::Shape, "conv gradient shape mismatch");
  const ConstMap w(weight.data(), out_channels, taps);
  const ConstMap gy(grad_y.data.data(), Eigen::Index(x.pixels()), out_channels);
  Map gw(grad_weight.data(), out_channels, taps);
  // scalar reduction: Eigen's vectorized colwise sum over a Map peels an
  // address-dependent head, so its rounding would vary between runs
  for (Eigen::Index i = 0; i < gy.rows(); ++i)
    for (int c = 0; c < out_channels; ++c) grad_bias[c] += gy(i, c);
  if (k == 1) {
    gw.noalias() += gy.transpose() * ConstMap(x.data.data(), Eigen::Index(x.pixels()), x.channels);
    if (grad_x) {
      *grad_x = Grid(x.height, x.width, x.channels);
      Map(grad_x->data.data(), Eigen::Index(x.pixels()), x.channels).noalias() = gy * w;
    }
    return;
  }
  RowMatrix cols;
  im2col(x, k, cols);
  gw.noalias() += gy.transpose() * cols;
  if (grad_x) {
    RowMatrix gcols = gy * w;
    *grad_x = Grid(x.height, x.width, x.channels);
    col2im(gcols, k, *grad_x);
  }
}

Grid positional_encoding_grid(int h, int w, int frequencies) {
  require(h >= 1 && w >= 1 && frequencies >= 1, ErrorKind::Shape, "positional encoding needs positive sizes");
  Grid pe(h, w, 4 * frequencies);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double y = (i + 0.5) / h, x = (j + 0.5) / w;
      double* dst = pe.data.data() + pe.offset(i, j);
      for (int f = 0; f < frequencies; ++f) {
        const double omega = std::ldexp(std::numbers::pi, f);
        dst[4 * f + 0] = std::sin(omega * x);
        dst[4 * f + 1] = std::cos(omega * x);
        dst[4 * f + 2] = std::sin(omega * y);
        dst[4 * f + 3] = std::cos(omega * y);
      }
    }
  return pe;
}

void split_channels(const Grid& g, int first_channels, Grid* first, Grid* second) {
  const int rest = g.channels - first_channels;
  if (first) *first = Grid(g.height, g.width, first_channels);
  if (second) *second = Grid(g.height, g.width, rest);
  for (std::size_t i = 0; i < g.pixels(); ++i) {
    const double* src = g.data.data() + i * g.channels;
    if (first) std::copy_n(src, first_channels, first->data.data() + i * first_channels);
    if (second) std::copy_n(src + first_channels, rest, second->data.data() + i * rest);
  }
}

}  // namespace anyup
