#pragma once

// Layer primitives with explicit backward passes. All grids are HWC doubles.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "anyup/tensor.hpp"

namespace anyup {

/// A named trainable tensor. Shapes are stored rank-3 so every tensor maps
/// onto one ANYT file: conv weights are (out, k*k, in), biases (1, 1, out).
struct ParamTensor {
  std::string name;
  std::array<int, 3> shape{};
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
};

class ParamSet {
 public:
  ParamTensor& add(std::string name, std::array<int, 3> shape);

  std::size_t index(const std::string& name) const;
  bool contains(const std::string& name) const;
  ParamTensor& operator[](std::size_t i) { return tensors_[i]; }
  const ParamTensor& operator[](std::size_t i) const { return tensors_[i]; }
  ParamTensor& at(const std::string& name) { return tensors_[index(name)]; }
  const ParamTensor& at(const std::string& name) const { return tensors_[index(name)]; }

  std::size_t size() const noexcept { return tensors_.size(); }
  std::size_t scalar_count() const noexcept;
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  /// Same names and shapes, all values zero.
  ParamSet zeros_like() const;
  void set_zero();
  bool same_layout(const ParamSet& other) const;

 private:
  std::vector<ParamTensor> tensors_;
};

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

Grid silu(const Grid& x);

/// Same-size correlation with zero padding, stride 1. weight is
/// [out][k*k][in] (tap-major), bias [out].
Grid conv2d(const Grid& x, std::span<const double> weight, std::span<const double> bias, int out_channels,
            int kernel_size);

/// Accumulates weight/bias gradients; writes dL/dx into grad_x when non-null.
void conv2d_backward(const Grid& x, std::span<const double> weight, int out_channels, int kernel_size,
                     const Grid& grad_y, std::span<double> grad_weight, std::span<double> grad_bias, Grid* grad_x);

/// Sinusoidal encoding of cell-centre coordinates normalized to [0, 1]:
/// for f_i = 2^i * pi the channels are (sin f_i x, cos f_i x, sin f_i y, cos f_i y).
Grid positional_encoding_grid(int h, int w, int frequencies);

/// Splits a gradient over a channel concatenation [a | b].
void split_channels(const Grid& g, int first_channels, Grid* first, Grid* second);

}  // namespace anyup
