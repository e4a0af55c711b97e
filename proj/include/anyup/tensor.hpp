#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "anyup/error.hpp"

namespace anyup {

/// Dense rank-3 array in row-major [height x width x channels] order,
/// channel index fastest.
template <typename T>
struct Array3 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<T> data;

  Array3() = default;
  Array3(int h, int w, int c, T fill = T{})
      : height(h), width(w), channels(c), data(checked_size(h, w, c), fill) {}
  Array3(int h, int w, int c, std::vector<T> values)
      : height(h), width(w), channels(c), data(std::move(values)) {
    require(data.size() == checked_size(h, w, c), ErrorKind::Shape,
            "data length does not match " + shape_string());
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }
  bool same_shape(const Array3& o) const noexcept {
    return height == o.height && width == o.width && channels == o.channels;
  }

  std::size_t offset(int y, int x) const noexcept {
    return (static_cast<std::size_t>(y) * width + x) * channels;
  }
  T& at(int y, int x, int c) noexcept { return data[offset(y, x) + c]; }
  const T& at(int y, int x, int c) const noexcept { return data[offset(y, x) + c]; }

  std::span<T> pixel(int y, int x) noexcept { return {data.data() + offset(y, x), std::size_t(channels)}; }
  std::span<const T> pixel(int y, int x) const noexcept {
    return {data.data() + offset(y, x), std::size_t(channels)};
  }

  std::string shape_string() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
  }

  static std::size_t checked_size(int h, int w, int c) {
    require(h >= 0 && w >= 0 && c >= 0, ErrorKind::Shape, "negative extent");
    return static_cast<std::size_t>(h) * w * c;
  }
};

/// Internal double-precision grid used for model computation.
using Grid = Array3<double>;

/// A spatial grid of feature vectors (p, q and crop targets).
class FeatureMap : public Array3<float> {
 public:
  using Array3<float>::Array3;
  FeatureMap(Array3<float> a) : Array3<float>(std::move(a)) {}

  /// Throws Validation when an extent is zero or a value is not finite.
  void validate() const;
};

/// High-resolution RGB guidance, values in [0, 1], always three channels.
class GuidanceImage : public Array3<float> {
 public:
  GuidanceImage() = default;
  GuidanceImage(int h, int w, float fill = 0.0f) : Array3<float>(h, w, 3, fill) {}
  GuidanceImage(int h, int w, std::vector<float> values) : Array3<float>(h, w, 3, std::move(values)) {}
  explicit GuidanceImage(Array3<float> a);

  void validate() const;
};

template <typename To, typename From>
Array3<To> convert(const Array3<From>& src) {
  Array3<To> out(src.height, src.width, src.channels);
  for (std::size_t i = 0; i < src.size(); ++i) out.data[i] = static_cast<To>(src.data[i]);
  return out;
}

inline Grid to_grid(const Array3<float>& a) { return convert<double>(a); }
inline FeatureMap to_feature_map(const Grid& g) { return FeatureMap(convert<float>(g)); }

/// Rectangular spatial slice [y0, y0+h) x [x0, x0+w), all channels.
template <typename T>
Array3<T> slice(const Array3<T>& src, int y0, int x0, int h, int w) {
  require(y0 >= 0 && x0 >= 0 && h > 0 && w > 0 && y0 + h <= src.height && x0 + w <= src.width,
          ErrorKind::Shape, "slice window outside " + src.shape_string());
  Array3<T> out(h, w, src.channels);
  for (int y = 0; y < h; ++y) {
    const T* row = src.data.data() + src.offset(y0 + y, x0);
    std::copy(row, row + std::size_t(w) * src.channels, out.data.data() + out.offset(y, 0));
  }
  return out;
}

/// Channel-wise concatenation of two grids with equal spatial extent.
template <typename T>
Array3<T> concat_channels(const Array3<T>& a, const Array3<T>& b) {
  require(a.height == b.height && a.width == b.width, ErrorKind::Shape, "concat spatial mismatch");
  Array3<T> out(a.height, a.width, a.channels + b.channels);
  for (std::size_t i = 0; i < a.pixels(); ++i) {
    std::copy_n(a.data.data() + i * a.channels, a.channels, out.data.data() + i * out.channels);
    std::copy_n(b.data.data() + i * b.channels, b.channels, out.data.data() + i * out.channels + a.channels);
  }
  return out;
}

}  // namespace anyup
