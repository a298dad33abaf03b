#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "invariance/error.hpp"

namespace invariance {

/// Byte quantization with round-half-up: 0.5 maps to 128.
inline std::uint8_t quantize(double intensity) {
  const double scaled = std::floor(std::clamp(intensity, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(scaled);
}

inline double dequantize(std::uint8_t byte) { return static_cast<double>(byte) / 255.0; }

/// Single-channel raster, row-major, intensities in [0,1].
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}
  GrayImage(int w, int h, std::vector<double> values) : width(w), height(h), pixels(std::move(values)) {
    if (pixels.size() != size())
      fail(ErrorCode::DimensionMismatch, "pixel count does not match width*height");
  }

  std::size_t size() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
  double& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * width + col]; }
  double at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
  bool same_shape(const GrayImage& other) const { return width == other.width && height == other.height; }

  bool in_range() const {
    return std::all_of(pixels.begin(), pixels.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
  }

  std::vector<std::uint8_t> to_bytes() const {
    std::vector<std::uint8_t> out(pixels.size());
    std::transform(pixels.begin(), pixels.end(), out.begin(), quantize);
    return out;
  }

  static GrayImage from_bytes(int w, int h, std::span<const std::uint8_t> bytes) {
    if (bytes.size() != static_cast<std::size_t>(w) * static_cast<std::size_t>(h))
      fail(ErrorCode::DimensionMismatch, "byte count does not match width*height");
    GrayImage img(w, h);
    std::transform(bytes.begin(), bytes.end(), img.pixels.begin(), dequantize);
    return img;
  }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

/// Boolean raster with the same layout as GrayImage.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> cells;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), cells(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0) {}

  bool at(int row, int col) const { return cells[static_cast<std::size_t>(row) * width + col] != 0; }
  void set(int row, int col, bool v = true) { cells[static_cast<std::size_t>(row) * width + col] = v ? 1 : 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), 1)); }

  friend bool operator==(const Mask&, const Mask&) = default;
};

inline void require_same_shape(const GrayImage& a, const GrayImage& b, ErrorCode code = ErrorCode::ShapeMismatch) {
  if (!a.same_shape(b)) fail(code, "images differ in shape");
}

/// Pixels whose quantized bytes differ.
inline std::size_t l0_quantized(const GrayImage& a, const GrayImage& b) {
  require_same_shape(a, b);
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) n += quantize(a.pixels[i]) != quantize(b.pixels[i]);
  return n;
}

inline double linf_distance(const GrayImage& a, const GrayImage& b) {
  require_same_shape(a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
  return m;
}

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double l2_distance(const GrayImage& a, const GrayImage& b) {
  require_same_shape(a, b);
  return l2_distance(a.pixels, b.pixels);
}

}  // namespace invariance
