#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "anyup/tensor.hpp"

namespace anyup {

// ANYT container, little-endian:
//   "ANYT" | version u8 = 1 | dtype u8 (1 = float32) | ndim u8 = 3 |
//   ndim x u32 extents (height, width, channels) | float32 payload
inline constexpr std::size_t kAnytHeaderBytes = 4 + 3 + 3 * 4;
inline constexpr std::uint8_t kAnytVersion = 1;
inline constexpr std::uint8_t kAnytFloat32 = 1;

std::vector<std::uint8_t> encode_anyt(const FeatureMap& map);
FeatureMap decode_anyt(std::span<const std::uint8_t> bytes);

FeatureMap read_feature_map(const std::filesystem::path& path);
void write_feature_map(const FeatureMap& map, const std::filesystem::path& path);

/// Decodes an 8-bit PNG as RGB in [0, 1]. Gray is replicated, alpha dropped.
GuidanceImage load_image(const std::filesystem::path& path);
/// Writes an 8-bit RGB PNG; values are clamped to [0, 1] and rounded.
void save_png(const GuidanceImage& image, const std::filesystem::path& path);

/// Source coordinate of a destination cell centre (align-corners = false).
inline double source_coordinate(int dst, int in_extent, int out_extent) {
  return (dst + 0.5) * (static_cast<double>(in_extent) / out_extent) - 0.5;
}

/// Index of the nearest source cell for a destination cell; ties go to the
/// smaller index. Evaluated in integer arithmetic so it is exact.
int nearest_source_index(int dst, int in_extent, int out_extent);

template <typename T>
Array3<T> resize_bilinear(const Array3<T>& input, int out_h, int out_w);
template <typename T>
Array3<T> resize_nearest(const Array3<T>& input, int out_h, int out_w);

inline FeatureMap resize_bilinear(const FeatureMap& m, int h, int w) {
  return FeatureMap(resize_bilinear<float>(m, h, w));
}
inline GuidanceImage resize_bilinear(const GuidanceImage& m, int h, int w) {
  return GuidanceImage(resize_bilinear<float>(m, h, w));
}
inline FeatureMap resize_nearest(const FeatureMap& m, int h, int w) {
  return FeatureMap(resize_nearest<float>(m, h, w));
}
inline GuidanceImage resize_nearest(const GuidanceImage& m, int h, int w) {
  return GuidanceImage(resize_nearest<float>(m, h, w));
}

/// Area-average resampling: each output cell is the overlap-weighted mean of
/// the input cells its footprint covers. Linear; see resize_area_adjoint.
Grid resize_area(const Grid& input, int out_h, int out_w);
/// Transpose of resize_area, used for backpropagation.
Grid resize_area_adjoint(const Grid& grad_out, int in_h, int in_w);

}  // namespace anyup
