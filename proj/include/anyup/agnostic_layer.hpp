#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "anyup/tensor.hpp"

namespace anyup {

/// M learned k x k filters shared by every input channel.
struct KernelBasis {
  int count = 0;        // M, canonical output channels
  int kernel_size = 0;  // k, odd
  std::vector<double> filters;  // [M][k][k]

  /// Seeded uniform initialization in [-1/k, 1/k].
  static KernelBasis random(int count, int kernel_size, std::uint64_t seed);
  void validate() const;
};

/// Feature-agnostic convolution. Every input channel is correlated with all M
/// filters (zero padding, stride 1), the M responses at each location are
/// softmax-normalized, and the resulting distributions are averaged over the
/// input channels. The output is h x w x M for any channel count N.
Grid agnostic_conv(const Grid& features, std::span<const double> filters, int count, int kernel_size);
FeatureMap agnostic_conv(const FeatureMap& features, const KernelBasis& basis);

/// Accumulates dL/dfilters into grad_filters given dL/doutput.
void agnostic_conv_backward(const Grid& features, std::span<const double> filters, int count, int kernel_size,
                            const Grid& grad_out, std::span<double> grad_filters);

}  // namespace anyup
