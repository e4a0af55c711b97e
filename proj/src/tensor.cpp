#include "anyup/tensor.hpp"

#include <cmath>

namespace anyup {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Io: return "io error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Unsupported: return "unsupported format";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::Numerical: return "numerical error";
  }
  return "error";
}

void FeatureMap::validate() const {
  require(height > 0 && width > 0 && channels > 0, ErrorKind::Validation,
          "feature map extents must be positive, got " + shape_string());
  require(data.size() == checked_size(height, width, channels), ErrorKind::Validation,
          "feature map data length mismatch");
  for (float v : data) {
    if (!std::isfinite(v)) fail(ErrorKind::Validation, "feature map contains a non-finite value");
  }
}

GuidanceImage::GuidanceImage(Array3<float> a) : Array3<float>(std::move(a)) {
  require(channels == 3, ErrorKind::Shape, "guidance image must have 3 channels, got " + shape_string());
}

void GuidanceImage::validate() const {
  require(height > 0 && width > 0 && channels == 3, ErrorKind::Validation,
          "guidance image must be HxWx3 with positive extent, got " + shape_string());
  for (float v : data) {
    if (!(v >= 0.0f && v <= 1.0f)) fail(ErrorKind::Validation, "guidance image value outside [0, 1]");
  }
}

}  // namespace anyup
