#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mscnn/tensor.hpp"

namespace mscnn {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

/// Head centers in pixel coordinates of an image of the given size.
struct HeadAnnotations {
  std::vector<Point> points;
  std::size_t width = 0;
  std::size_t height = 0;

  std::size_t count() const noexcept { return points.size(); }

  /// Throws std::invalid_argument naming the first point outside
  /// [0, width) x [0, height).
  void validate() const {
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto& p = points[i];
      if (!(p.x >= 0.0 && p.x < static_cast<double>(width) && p.y >= 0.0 && p.y < static_cast<double>(height)))
        throw std::invalid_argument("annotation point " + std::to_string(i) + " (" + std::to_string(p.x) + ", " +
                                    std::to_string(p.y) + ") lies outside the " + std::to_string(width) + "x" +
                                    std::to_string(height) + " image");
    }
  }
};

/// Single-channel grid in persons per pixel, stored row-major as 32-bit
/// floats so that files round-trip bitwise.
struct DensityMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> cells;

  DensityMap() = default;
  DensityMap(std::size_t w, std::size_t h) : width(w), height(h), cells(w * h, 0.0f) {}

  float& at(std::size_t y, std::size_t x) { return cells[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return cells[y * width + x]; }

  template <typename T>
  Tensor<T> to_tensor() const {
    return Tensor<T>({1, height, width}, std::vector<T>(cells.begin(), cells.end()));
  }

  bool operator==(const DensityMap&) const = default;
};

struct KernelParams {
  double beta = 0.3;
  std::size_t k_neighbors = 10;
  double fallback_sigma = 15.0;
  double truncation_radius_sigmas = 3.0;

  void validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be positive");
    if (k_neighbors == 0) throw std::invalid_argument("k_neighbors must be positive");
    if (!(fallback_sigma > 0.0) || !std::isfinite(fallback_sigma))
      throw std::invalid_argument("fallback_sigma must be positive");
    if (!(truncation_radius_sigmas >= 1.0) || !std::isfinite(truncation_radius_sigmas))
      throw std::invalid_argument("truncation_radius_sigmas must be >= 1");
  }
};

class InsufficientNeighbors : public std::invalid_argument {
 public:
  InsufficientNeighbors() : std::invalid_argument("insufficient neighbors: need at least 2 points") {}
};

/// Mean distance from each point to its min(k, M-1) nearest other points.
/// Brute force, O(M^2 log k).
inline std::vector<double> mean_knn_distance(std::span<const Point> points, std::size_t k) {
  if (points.size() < 2) throw InsufficientNeighbors();
  if (k == 0) throw std::invalid_argument("mean_knn_distance: k must be positive");
  const std::size_t m = points.size();
  const std::size_t kk = std::min(k, m - 1);
  std::vector<double> result(m);
  std::vector<double> dist;
  dist.reserve(m - 1);
  for (std::size_t i = 0; i < m; ++i) {
    dist.clear();
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      dist.push_back(std::hypot(points[i].x - points[j].x, points[i].y - points[j].y));
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
    // sorted accumulation keeps the result independent of input order
    double acc = 0.0;
    for (std::size_t t = 0; t < kk; ++t) acc += dist[t];
    result[i] = acc / static_cast<double>(kk);
  }
  return result;
}

/// sigma_i = beta * d_i. Entries that are non-finite or not positive (no
/// neighbours, or co-located heads) take fallback_sigma.
inline std::vector<double> sigma_for_heads(std::span<const double> d_bars, const KernelParams& params) {
  params.validate();
  std::vector<double> sigmas(d_bars.size());
  for (std::size_t i = 0; i < d_bars.size(); ++i) {
    const double d = d_bars[i];
    sigmas[i] = (std::isfinite(d) && d > 0.0) ? params.beta * d : params.fallback_sigma;
  }
  return sigmas;
}

/// Per-head bandwidths for an annotation set, including the lone-head case.
inline std::vector<double> sigmas_for_points(std::span<const Point> points, const KernelParams& params) {
  params.validate();
  if (points.size() < 2) return std::vector<double>(points.size(), params.fallback_sigma);
  const auto d = mean_knn_distance(points, params.k_neighbors);
  return sigma_for_heads(d, params);
}

/// Unnormalized Gaussian footprint of one head: values at cell centers inside
/// the truncation window, clipped to the image.
struct KernelWindow {
  std::size_t x0 = 0, y0 = 0, w = 0, h = 0;
  std::vector<double> weights;  // h x w, row-major

  double sum() const {
    double s = 0.0;
    for (double v : weights) s += v;
    return s;
  }
};

inline std::size_t nearest_pixel(double coord, std::size_t extent) {
  const double r = std::floor(coord + 0.5);
  if (r <= 0.0) return 0;
  return std::min(static_cast<std::size_t>(r), extent - 1);
}

inline KernelWindow gaussian_window(const Point& head, double sigma, double truncation_radius_sigmas,
                                    std::size_t width, std::size_t height) {
  const std::size_t cx = nearest_pixel(head.x, width);
  const std::size_t cy = nearest_pixel(head.y, height);
  const auto radius = static_cast<std::size_t>(std::ceil(truncation_radius_sigmas * sigma));
  KernelWindow win;
  win.x0 = cx > radius ? cx - radius : 0;
  win.y0 = cy > radius ? cy - radius : 0;
  const std::size_t x1 = std::min(width - 1, cx + radius);
  const std::size_t y1 = std::min(height - 1, cy + radius);
  win.w = x1 - win.x0 + 1;
  win.h = y1 - win.y0 + 1;
  win.weights.resize(win.w * win.h);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t y = 0; y < win.h; ++y) {
    const double dy = static_cast<double>(win.y0 + y) - static_cast<double>(cy);
    for (std::size_t x = 0; x < win.w; ++x) {
      const double dx = static_cast<double>(win.x0 + x) - static_cast<double>(cx);
      win.weights[y * win.w + x] = std::exp(-(dx * dx + dy * dy) * inv2s2);
    }
  }
  return win;
}

/// Geometry-adaptive density map: every head contributes a truncated
/// Gaussian with sigma_i = beta * mean kNN distance, renormalized so its
/// in-image mass is exactly one.
inline DensityMap render_density_map(const HeadAnnotations& ann, const KernelParams& params) {
  params.validate();
  ann.validate();
  if (ann.width == 0 || ann.height == 0) throw std::invalid_argument("render_density_map: empty image extents");
  std::vector<double> acc(ann.width * ann.height, 0.0);
  const auto sigmas = sigmas_for_points(ann.points, params);
  for (std::size_t i = 0; i < ann.points.size(); ++i) {
    const auto win = gaussian_window(ann.points[i], sigmas[i], params.truncation_radius_sigmas, ann.width, ann.height);
    const double norm = 1.0 / win.sum();  // center cell has weight 1, so sum >= 1
    for (std::size_t y = 0; y < win.h; ++y)
      for (std::size_t x = 0; x < win.w; ++x)
        acc[(win.y0 + y) * ann.width + win.x0 + x] += win.weights[y * win.w + x] * norm;
  }
  DensityMap map(ann.width, ann.height);
  for (std::size_t i = 0; i < acc.size(); ++i) map.cells[i] = static_cast<float>(acc[i]);
  return map;
}

/// Sum-pools factor x factor blocks, preserving the total count.
inline DensityMap downsample_sum(const DensityMap& map, std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("downsample_sum: factor must be positive");
  if (map.width % factor != 0 || map.height % factor != 0)
    throw ShapeError("downsample_sum: " + std::to_string(map.width) + "x" + std::to_string(map.height) +
                     " map is not divisible by factor " + std::to_string(factor));
  if (factor == 1) return map;
  const std::size_t ow = map.width / factor, oh = map.height / factor;
  DensityMap out(ow, oh);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double s = 0.0;
      for (std::size_t y = oy * factor; y < (oy + 1) * factor; ++y)
        for (std::size_t x = ox * factor; x < (ox + 1) * factor; ++x) s += map.at(y, x);
      out.at(oy, ox) = static_cast<float>(s);
    }
  }
  return out;
}

inline double count_from_density(const DensityMap& map) {
  double s = 0.0;
  for (float v : map.cells) s += v;
  return s;
}

}  // namespace mscnn
