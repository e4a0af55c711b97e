#include "anyup/feature_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace anyup {
namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

}  // namespace

std::vector<std::uint8_t> encode_anyt(const FeatureMap& map) {
  map.validate();
  std::vector<std::uint8_t> out;
  out.reserve(kAnytHeaderBytes + map.size() * 4);
  out.insert(out.end(), {'A', 'N', 'Y', 'T', kAnytVersion, kAnytFloat32, 3});
  put_u32(out, static_cast<std::uint32_t>(map.height));
  put_u32(out, static_cast<std::uint32_t>(map.width));
  put_u32(out, static_cast<std::uint32_t>(map.channels));
  for (float v : map.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

FeatureMap decode_anyt(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "ANYT", 4) != 0)
    fail(ErrorKind::Format, "missing ANYT magic bytes");
  require(bytes.size() >= kAnytHeaderBytes, ErrorKind::Io, "truncated ANYT header");
  require(bytes[4] == kAnytVersion, ErrorKind::Unsupported,
          "unsupported ANYT version " + std::to_string(bytes[4]));
  require(bytes[5] == kAnytFloat32, ErrorKind::Unsupported,
          "unsupported ANYT dtype code " + std::to_string(bytes[5]));
  require(bytes[6] == 3, ErrorKind::Format, "ANYT feature maps must have ndim = 3");

  const std::uint32_t h = get_u32(&bytes[7]);
  const std::uint32_t w = get_u32(&bytes[11]);
  const std::uint32_t c = get_u32(&bytes[15]);
  require(h > 0 && w > 0 && c > 0, ErrorKind::Validation, "ANYT extents must be positive");
  require(h <= 1u << 20 && w <= 1u << 20 && c <= 1u << 20, ErrorKind::Format, "implausible ANYT extents");
  const std::uint64_t count = std::uint64_t(h) * w * c;
  const std::uint64_t payload = bytes.size() - kAnytHeaderBytes;
  require(payload >= count * 4, ErrorKind::Io, "truncated ANYT payload");
  require(payload == count * 4, ErrorKind::Format, "trailing bytes after ANYT payload");

  FeatureMap map(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
  const std::uint8_t* p = bytes.data() + kAnytHeaderBytes;
  for (std::uint64_t i = 0; i < count; ++i) map.data[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  map.validate();
  return map;
}

FeatureMap read_feature_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(!in.bad(), ErrorKind::Io, "read failed for " + path.string());
  return decode_anyt(bytes);
}

void write_feature_map(const FeatureMap& map, const std::filesystem::path& path) {
  const auto bytes = encode_anyt(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  require(bool(out), ErrorKind::Io, "write failed for " + path.string());
}

GuidanceImage load_image(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  require(bool(probe), ErrorKind::Io, "cannot open " + path.string());
  unsigned char sig[8] = {};
  probe.read(reinterpret_cast<char*>(sig), 8);
  require(probe.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0, ErrorKind::Format,
          path.string() + " is not a PNG file");
  probe.close();

  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    fail(ErrorKind::Format, "cannot decode " + path.string() + ": " + img.message);
  // RGBA keeps the stored colour bytes untouched; alpha is discarded below
  // instead of composited.
  img.format = PNG_FORMAT_RGBA;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    fail(ErrorKind::Format, "cannot decode " + path.string() + ": " + msg);
  }
  GuidanceImage out(int(img.height), int(img.width));
  for (std::size_t i = 0; i < out.pixels(); ++i)
    for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = float(buf[i * 4 + c] / 255.0);
  return out;
}

void save_png(const GuidanceImage& image, const std::filesystem::path& path) {
  require(image.height > 0 && image.width > 0, ErrorKind::Shape, "cannot write an empty image");
  std::vector<png_byte> buf(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(double(image.data[i]), 0.0, 1.0);
    buf[i] = static_cast<png_byte>(std::lround(v * 255.0));
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(image.width);
  img.height = png_uint_32(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr))
    fail(ErrorKind::Io, "cannot write " + path.string() + ": " + img.message);
}

int nearest_source_index(int dst, int in_extent, int out_extent) {
  // src - 0.5 = ((2 dst + 1) in - 2 out) / (2 out); ceil of that rounds half down.
  const long long num = (2LL * dst + 1) * in_extent - 2LL * out_extent;
  const long long den = 2LL * out_extent;
  long long q = num / den;
  if (num % den != 0 && num > 0) ++q;
  return static_cast<int>(std::clamp<long long>(q, 0, in_extent - 1));
}

namespace {

struct Tap {
  int i0, i1;
  double frac;
};

Tap bilinear_tap(int dst, int in_extent, int out_extent) {
  double src = source_coordinate(dst, in_extent, out_extent);
  src = std::max(src, 0.0);
  int i0 = std::min(static_cast<int>(src), in_extent - 1);
  int i1 = std::min(i0 + 1, in_extent - 1);
  return {i0, i1, src - i0};
}

}  // namespace

template <typename T>
Array3<T> resize_bilinear(const Array3<T>& input, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, ErrorKind::Shape, "resize target must be at least 1x1");
  require(input.height >= 1 && input.width >= 1, ErrorKind::Shape, "cannot resize an empty map");
  if (out_h == input.height && out_w == input.width) return input;
  Array3<T> out(out_h, out_w, input.channels);
  std::vector<Tap> xs(out_w);
  for (int x = 0; x < out_w; ++x) xs[x] = bilinear_tap(x, input.width, out_w);
  for (int y = 0; y < out_h; ++y) {
    const Tap ty = bilinear_tap(y, input.height, out_h);
    for (int x = 0; x < out_w; ++x) {
      const Tap& tx = xs[x];
      for (int c = 0; c < input.channels; ++c) {
        const double a = input.at(ty.i0, tx.i0, c), b = input.at(ty.i0, tx.i1, c);
        const double d = input.at(ty.i1, tx.i0, c), e = input.at(ty.i1, tx.i1, c);
        const double top = a + (b - a) * tx.frac;
        const double bottom = d + (e - d) * tx.frac;
        out.at(y, x, c) = static_cast<T>(top + (bottom - top) * ty.frac);
      }
    }
  }
  return out;
}

template <typename T>
Array3<T> resize_nearest(const Array3<T>& input, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, ErrorKind::Shape, "resize target must be at least 1x1");
  require(input.height >= 1 && input.width >= 1, ErrorKind::Shape, "cannot resize an empty map");
  Array3<T> out(out_h, out_w, input.channels);
  for (int y = 0; y < out_h; ++y) {
    const int sy = nearest_source_index(y, input.height, out_h);
    for (int x = 0; x < out_w; ++x) {
      const int sx = nearest_source_index(x, input.width, out_w);
      std::copy_n(input.data.data() + input.offset(sy, sx), input.channels, out.data.data() + out.offset(y, x));
    }
  }
  return out;
}

template Array3<float> resize_bilinear(const Array3<float>&, int, int);
template Array3<double> resize_bilinear(const Array3<double>&, int, int);
template Array3<float> resize_nearest(const Array3<float>&, int, int);
template Array3<double> resize_nearest(const Array3<double>&, int, int);

namespace {

// Overlap weights of each output cell's footprint with the input cells,
// normalized to sum to one.
struct AreaAxis {
  std::vector<int> first;
  std::vector<std::vector<double>> weights;
};

AreaAxis area_axis(int in_extent, int out_extent) {
  AreaAxis axis;
  axis.first.resize(out_extent);
  axis.weights.resize(out_extent);
  const double scale = static_cast<double>(in_extent) / out_extent;
  for (int o = 0; o < out_extent; ++o) {
    const double lo = o * scale, hi = (o + 1) * scale;
    const int i0 = static_cast<int>(std::floor(lo));
    const int i1 = std::min(in_extent, static_cast<int>(std::ceil(hi)));
    axis.first[o] = i0;
    double total = 0.0;
    for (int i = i0; i < i1; ++i) {
      const double w = std::min(hi, double(i + 1)) - std::max(lo, double(i));
      axis.weights[o].push_back(w);
      total += w;
    }
    for (double& w : axis.weights[o]) w /= total;
  }
  return axis;
}

}  // namespace

Grid resize_area(const Grid& input, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, ErrorKind::Shape, "resize target must be at least 1x1");
  if (out_h == input.height && out_w == input.width) return input;
  const AreaAxis ay = area_axis(input.height, out_h), ax = area_axis(input.width, out_w);
  Grid out(out_h, out_w, input.channels);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      double* dst = out.data.data() + out.offset(y, x);
      for (std::size_t a = 0; a < ay.weights[y].size(); ++a)
        for (std::size_t b = 0; b < ax.weights[x].size(); ++b) {
          const double w = ay.weights[y][a] * ax.weights[x][b];
          const double* src = input.data.data() + input.offset(ay.first[y] + int(a), ax.first[x] + int(b));
          for (int c = 0; c < input.channels; ++c) dst[c] += w * src[c];
        }
    }
  return out;
}

Grid resize_area_adjoint(const Grid& grad_out, int in_h, int in_w) {
  if (grad_out.height == in_h && grad_out.width == in_w) return grad_out;
  const AreaAxis ay = area_axis(in_h, grad_out.height), ax = area_axis(in_w, grad_out.width);
  Grid grad_in(in_h, in_w, grad_out.channels);
  for (int y = 0; y < grad_out.height; ++y)
    for (int x = 0; x < grad_out.width; ++x) {
      const double* src = grad_out.data.data() + grad_out.offset(y, x);
      for (std::size_t a = 0; a < ay.weights[y].size(); ++a)
        for (std::size_t b = 0; b < ax.weights[x].size(); ++b) {
          const double w = ay.weights[y][a] * ax.weights[x][b];
          double* dst = grad_in.data.data() + grad_in.offset(ay.first[y] + int(a), ax.first[x] + int(b));
          for (int c = 0; c < grad_out.channels; ++c) dst[c] += w * src[c];
        }
    }
  return grad_in;
}

}  // namespace anyup
