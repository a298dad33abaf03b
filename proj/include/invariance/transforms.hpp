#pragma once

// Label-preserving affine transforms and the exhaustive alignment search.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "invariance/error.hpp"
#include "invariance/image.hpp"

namespace invariance {

struct TransformBounds {
  static constexpr double rotation_deg = 20.0;
  static constexpr double shift = 6.0;
  static constexpr double shear = 0.20;
  static constexpr double scale_lo = 0.5;
  static constexpr double scale_hi = 1.5;
};

struct TransformParams {
  double rotation_deg = 0.0;
  double shift_x = 0.0;
  double shift_y = 0.0;
  double shear_frac = 0.0;
  double scale = 1.0;

  static TransformParams identity() { return {}; }

  bool is_identity() const {
    return rotation_deg == 0.0 && shift_x == 0.0 && shift_y == 0.0 && shear_frac == 0.0 && scale == 1.0;
  }

  bool valid() const {
    constexpr double tol = 1e-12;
    return std::abs(rotation_deg) <= TransformBounds::rotation_deg + tol &&
           std::abs(shift_x) <= TransformBounds::shift + tol && std::abs(shift_y) <= TransformBounds::shift + tol &&
           std::abs(shear_frac) <= TransformBounds::shear + tol && scale >= TransformBounds::scale_lo - tol &&
           scale <= TransformBounds::scale_hi + tol;
  }

  void validate() const {
    if (!valid()) fail(ErrorCode::InvalidParams, "transform parameters outside the allowed family");
  }

  friend bool operator==(const TransformParams&, const TransformParams&) = default;
};

/// Inclusive arithmetic range lo, lo+step, ..., <= hi.
struct ParamRange {
  double lo = 0.0;
  double hi = 0.0;
  double step = 1.0;

  static ParamRange single(double v) { return {v, v, 1.0}; }

  std::vector<double> values() const {
    if (!(step > 0.0) || hi < lo) fail(ErrorCode::EmptyGrid, "range needs step > 0 and lo <= hi");
    std::vector<double> out;
    for (std::size_t i = 0;; ++i) {
      const double v = lo + static_cast<double>(i) * step;
      if (v > hi + 1e-9 * step) break;
      // Snap to 1e-9 so e.g. -0.2 + 2*0.1 is exactly 0.
      out.push_back(std::round(v * 1e9) / 1e9);
    }
    return out;
  }
};

/// Per-parameter ranges whose Cartesian product enumerates the transform family.
struct TransformGrid {
  ParamRange rotation{-20.0, 20.0, 5.0};
  ParamRange shift_x{-6.0, 6.0, 2.0};
  ParamRange shift_y{-6.0, 6.0, 2.0};
  ParamRange shear{-0.2, 0.2, 0.1};
  ParamRange scale{0.5, 1.5, 0.25};

  static TransformGrid identity_only() {
    return {ParamRange::single(0), ParamRange::single(0), ParamRange::single(0), ParamRange::single(0),
            ParamRange::single(1)};
  }

  static TransformGrid shifts_only(double max_shift, double step) {
    auto g = identity_only();
    g.shift_x = g.shift_y = {-max_shift, max_shift, step};
    return g;
  }
};

/// Cartesian product, rotation outermost and scale innermost.
inline std::vector<TransformParams> enumerate_grid(const TransformGrid& g) {
  const auto rot = g.rotation.values();
  const auto sx = g.shift_x.values();
  const auto sy = g.shift_y.values();
  const auto sh = g.shear.values();
  const auto sc = g.scale.values();
  std::vector<TransformParams> out;
  out.reserve(rot.size() * sx.size() * sy.size() * sh.size() * sc.size());
  for (double r : rot)
    for (double x : sx)
      for (double y : sy)
        for (double s : sh)
          for (double c : sc) {
            TransformParams p{r, x, y, s, c};
            p.validate();
            out.push_back(p);
          }
  if (out.empty()) fail(ErrorCode::EmptyGrid, "transform grid is empty");
  return out;
}

/// Inverse pixel map for one parameter set: output (col,row) -> source (x,y).
/// Forward order is scale, shear, rotate, translate about the image centre.
class AffineMap {
 public:
  AffineMap(const TransformParams& p, int width, int height)
      : cx_((width - 1) / 2.0), cy_((height - 1) / 2.0), tx_(p.shift_x), ty_(p.shift_y) {
    const double theta = p.rotation_deg * std::numbers::pi / 180.0;
    const double c = p.rotation_deg == 0.0 ? 1.0 : std::cos(theta);
    const double s = p.rotation_deg == 0.0 ? 0.0 : std::sin(theta);
    // inverse = S^-1 * Sh^-1 * R^T
    const double inv_scale = 1.0 / p.scale;
    const double r00 = c, r01 = s, r10 = -s, r11 = c;  // R^T
    const double h00 = r00 - p.shear_frac * r10;       // Sh^-1 * R^T
    const double h01 = r01 - p.shear_frac * r11;
    a00_ = inv_scale * h00;
    a01_ = inv_scale * h01;
    a10_ = inv_scale * r10;
    a11_ = inv_scale * r11;
  }

  void source_of(int col, int row, double& sx, double& sy) const {
    const double ox = col - cx_ - tx_;
    const double oy = row - cy_ - ty_;
    sx = a00_ * ox + a01_ * oy + cx_;
    sy = a10_ * ox + a11_ * oy + cy_;
  }

 private:
  double cx_, cy_, tx_, ty_;
  double a00_ = 1, a01_ = 0, a10_ = 0, a11_ = 1;
};

namespace detail {

inline double pixel_or_zero(const GrayImage& img, int row, int col) {
  if (row < 0 || col < 0 || row >= img.height || col >= img.width) return 0.0;
  return img.at(row, col);
}

inline double bilinear(const GrayImage& img, double x, double y) {
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  if (fx0 < -1.0 || fy0 < -1.0 || fx0 >= img.width || fy0 >= img.height) return 0.0;
  const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
  const double fx = x - fx0, fy = y - fy0;
  const double p00 = pixel_or_zero(img, y0, x0), p01 = pixel_or_zero(img, y0, x0 + 1);
  const double top = p00 + fx * (p01 - p00);
  if (fy == 0.0) return top;
  const double p10 = pixel_or_zero(img, y0 + 1, x0), p11 = pixel_or_zero(img, y0 + 1, x0 + 1);
  const double bottom = p10 + fx * (p11 - p10);
  return top + fy * (bottom - top);
}

inline void apply_map(const GrayImage& img, const AffineMap& map, std::span<double> out) {
  std::size_t i = 0;
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c, ++i) {
      double sx, sy;
      map.source_of(c, r, sx, sy);
      out[i] = std::clamp(bilinear(img, sx, sy), 0.0, 1.0);
    }
}

}  // namespace detail

/// Inverse-mapped bilinear resampling with zero background, clamped to [0,1].
inline GrayImage apply_transform(const GrayImage& img, const TransformParams& p) {
  p.validate();
  GrayImage out(img.width, img.height);
  detail::apply_map(img, AffineMap(p, img.width, img.height), out.pixels);
  return out;
}

enum class AlignNorm { L0Soft, Linf, L2 };

inline constexpr double kSoftL0Threshold = 0.5;

/// Distance used by the alignment search. L0Soft counts pixels whose
/// absolute difference exceeds 0.5.
inline double align_distance(std::span<const double> a, std::span<const double> b, AlignNorm norm) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    switch (norm) {
      case AlignNorm::L0Soft: acc += d > kSoftL0Threshold ? 1.0 : 0.0; break;
      case AlignNorm::Linf: acc = std::max(acc, d); break;
      case AlignNorm::L2: acc += d * d; break;
    }
  }
  return norm == AlignNorm::L2 ? std::sqrt(acc) : acc;
}

namespace detail {

/// Same ordering as align_distance but stops once the partial value can no
/// longer beat `bound`; returns +inf in that case. L2 is compared squared.
inline double bounded_distance(std::span<const double> a, std::span<const double> b, AlignNorm norm, double bound) {
  const double limit = norm == AlignNorm::L2 ? bound * bound : bound;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    switch (norm) {
      case AlignNorm::L0Soft: acc += d > kSoftL0Threshold ? 1.0 : 0.0; break;
      case AlignNorm::Linf: acc = std::max(acc, d); break;
      case AlignNorm::L2: acc += d * d; break;
    }
    if (acc > limit) return std::numeric_limits<double>::infinity();
  }
  return norm == AlignNorm::L2 ? std::sqrt(acc) : acc;
}

}  // namespace detail

struct AlignResult {
  TransformParams params;
  GrayImage image;
  double distance = std::numeric_limits<double>::infinity();
  std::size_t grid_index = 0;
};

/// Exhaustive search over the grid for the transform of `donor` closest to
/// `src`. Ties resolve to the earliest grid entry, also when `threads` > 1.
/// `bound` lets callers skip work that cannot beat an existing match; if
/// nothing is strictly below it the returned distance is +inf.
inline AlignResult align(const GrayImage& src, const GrayImage& donor, std::span<const TransformParams> grid,
                         AlignNorm norm, unsigned threads = 1,
                         double bound = std::numeric_limits<double>::infinity()) {
  require_same_shape(src, donor, ErrorCode::DimensionMismatch);
  if (grid.empty()) fail(ErrorCode::EmptyGrid, "transform grid is empty");

  struct Best {
    double distance = std::numeric_limits<double>::infinity();
    std::size_t index = std::numeric_limits<std::size_t>::max();
  };
  auto search = [&](std::size_t begin, std::size_t end) {
    Best best;
    // Inclusive bound: an exact tie with the caller's bound is still "found"
    // so that the caller's own tie-break decides.
    double cutoff = bound;
    std::vector<double> buf(src.size());
    for (std::size_t i = begin; i < end; ++i) {
      detail::apply_map(donor, AffineMap(grid[i], src.width, src.height), buf);
      const double d = detail::bounded_distance(src.pixels, buf, norm, cutoff);
      if (d < best.distance) {
        best = {d, i};
        cutoff = d;
      }
    }
    return best;
  };

  Best best;
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(grid.size())));
  if (threads == 1) {
    best = search(0, grid.size());
  } else {
    std::vector<Best> partial(threads);
    std::vector<std::thread> workers;
    const std::size_t chunk = (grid.size() + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = std::min(grid.size(), t * chunk), e = std::min(grid.size(), b + chunk);
      workers.emplace_back([&, t, b, e] { partial[t] = search(b, e); });
    }
    for (auto& w : workers) w.join();
    for (const auto& p : partial)
      if (p.distance < best.distance || (p.distance == best.distance && p.index < best.index)) best = p;
  }

  AlignResult result;
  if (best.index == std::numeric_limits<std::size_t>::max()) return result;
  result.params = grid[best.index];
  result.grid_index = best.index;
  result.distance = best.distance;
  result.image = apply_transform(donor, result.params);
  return result;
}

inline AlignResult align(const GrayImage& src, const GrayImage& donor, const TransformGrid& grid, AlignNorm norm,
                         unsigned threads = 1) {
  const auto points = enumerate_grid(grid);
  return align(src, donor, points, norm, threads);
}

}  // namespace invariance
