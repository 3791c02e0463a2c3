#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mscnn/density.hpp"
#include "mscnn/model.hpp"
#include "mscnn/optimizer.hpp"
#include "mscnn/rng.hpp"
#include "mscnn/tensor.hpp"

namespace mscnn {

inline constexpr std::size_t kModelStride = 4;

/// Largest box with extents divisible by `stride`, centered in a w x h image.
struct AlignedBox {
  std::size_t x0 = 0, y0 = 0, width = 0, height = 0;

  bool contains(const Point& p) const {
    return p.x >= static_cast<double>(x0) && p.x < static_cast<double>(x0 + width) &&
           p.y >= static_cast<double>(y0) && p.y < static_cast<double>(y0 + height);
  }
};

inline AlignedBox aligned_box(std::size_t width, std::size_t height, std::size_t stride = kModelStride) {
  const std::size_t w = width - width % stride, h = height - height % stride;
  if (w == 0 || h == 0)
    throw ShapeError("image " + std::to_string(width) + "x" + std::to_string(height) + " is smaller than stride " +
                     std::to_string(stride));
  return {(width - w) / 2, (height - h) / 2, w, h};
}

/// Crops a C x H x W tensor to [x0, x0 + w) x [y0, y0 + h).
template <typename T>
Tensor<T> crop_tensor(const Tensor<T>& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
  detail::require_rank3(img, "crop");
  if (x0 + w > img.dim(2) || y0 + h > img.dim(1))
    throw ShapeError("crop box exceeds image " + shape_str(img.shape()));
  Tensor<T> out({img.dim(0), h, w});
  for (std::size_t c = 0; c < img.dim(0); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

/// Keeps points inside the half-open box and shifts them to its origin.
inline HeadAnnotations crop_annotations(const HeadAnnotations& ann, std::size_t x0, std::size_t y0, std::size_t w,
                                        std::size_t h) {
  const AlignedBox box{x0, y0, w, h};
  HeadAnnotations out{{}, w, h};
  for (const auto& p : ann.points)
    if (box.contains(p)) out.points.push_back({p.x - static_cast<double>(x0), p.y - static_cast<double>(y0)});
  return out;
}

/// One training or evaluation item. `image` may have any extent; `target` is
/// the stride-pooled density of the annotations inside aligned_box(image),
/// which is also the region the model sees.
struct Sample {
  std::string id;
  Tensor<float> image;  // 1 x H x W, values in [0, 1]
  HeadAnnotations annotations;
  DensityMap target;

  AlignedBox box() const { return aligned_box(image.dim(2), image.dim(1)); }

  Tensor<float> model_input() const {
    const auto b = box();
    if (b.width == image.dim(2) && b.height == image.dim(1)) return image;
    return crop_tensor(image, b.x0, b.y0, b.width, b.height);
  }

  /// Ground-truth count over the region the model sees.
  double truth_count() const {
    const auto b = box();
    std::size_t n = 0;
    for (const auto& p : annotations.points) n += b.contains(p) ? 1 : 0;
    return static_cast<double>(n);
  }
};

/// Renders the cached target for the aligned region (crop, then render).
inline Sample make_sample(std::string id, Tensor<float> image, HeadAnnotations annotations,
                          const KernelParams& params) {
  detail::require_rank3(image, "make_sample");
  if (annotations.width != image.dim(2) || annotations.height != image.dim(1))
    throw ShapeError("make_sample: annotations sized " + std::to_string(annotations.width) + "x" +
                     std::to_string(annotations.height) + " for image " + shape_str(image.shape()));
  annotations.validate();
  Sample s{std::move(id), std::move(image), std::move(annotations), {}};
  const auto b = s.box();
  const auto inner = crop_annotations(s.annotations, b.x0, b.y0, b.width, b.height);
  s.target = downsample_sum(render_density_map(inner, params), kModelStride);
  return s;
}

/// Mirrors the image left-right; x maps to w - 1 - x (clamped at 0 for
/// points in the last pixel column's right half).
inline Sample flip_horizontal(const Sample& s, const KernelParams& params) {
  const std::size_t c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  Tensor<float> img({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) img.at(ch, y, x) = s.image.at(ch, y, w - 1 - x);
  HeadAnnotations ann{{}, w, h};
  for (const auto& p : s.annotations.points)
    ann.points.push_back({std::max(0.0, static_cast<double>(w) - 1.0 - p.x), p.y});
  return make_sample(s.id + "_flip", std::move(img), std::move(ann), params);
}

inline Sample crop_sample(const Sample& s, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h,
                          std::string id, const KernelParams& params) {
  return make_sample(std::move(id), crop_tensor(s.image, x0, y0, w, h),
                     crop_annotations(s.annotations, x0, y0, w, h), params);
}

/// Nine patches at 90% of each extent, anchored at {top, center, bottom} x
/// {left, center, right}, each followed by its mirror image: 18 samples.
inline std::vector<Sample> augment_ninecrop(const Sample& s, const KernelParams& params) {
  const std::size_t w = s.image.dim(2), h = s.image.dim(1);
  if (w < 10 || h < 10)
    throw ShapeError("augment_ninecrop: image " + shape_str(s.image.shape()) + " is smaller than 10x10");
  const std::size_t cw = w * 9 / 10, ch = h * 9 / 10;
  const std::size_t xs[3] = {0, (w - cw) / 2, w - cw};
  const std::size_t ys[3] = {0, (h - ch) / 2, h - ch};
  std::vector<Sample> out;
  out.reserve(18);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      auto crop = crop_sample(s, xs[c], ys[r], cw, ch, s.id + "_nc" + std::to_string(r * 3 + c), params);
      auto flipped = flip_horizontal(crop, params);
      out.push_back(std::move(crop));
      out.push_back(std::move(flipped));
    }
  return out;
}

/// Zero-pads bottom/right so the image is at least min_w x min_h.
inline Sample pad_to(const Sample& s, std::size_t min_w, std::size_t min_h, const KernelParams& params) {
  const std::size_t w = s.image.dim(2), h = s.image.dim(1);
  if (w >= min_w && h >= min_h) return s;
  const std::size_t nw = std::max(w, min_w), nh = std::max(h, min_h);
  Tensor<float> img({s.image.dim(0), nh, nw});
  for (std::size_t c = 0; c < s.image.dim(0); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) img.at(c, y, x) = s.image.at(c, y, x);
  HeadAnnotations ann{s.annotations.points, nw, nh};
  return make_sample(s.id, std::move(img), std::move(ann), params);
}

/// n uniformly placed square patches plus their mirrors. The requested side
/// is trimmed down to a multiple of the model stride (225 -> 224).
inline std::vector<Sample> augment_randomcrop(const Sample& s, std::size_t n, std::size_t size, Rng& rng,
                                              const KernelParams& params) {
  const std::size_t side = size - size % kModelStride;
  if (side == 0) throw std::invalid_argument("augment_randomcrop: crop size must be at least 4");
  const Sample src = pad_to(s, side, side, params);
  const std::size_t w = src.image.dim(2), h = src.image.dim(1);
  std::vector<Sample> out;
  out.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t x0 = uniform_below(rng, w - side + 1);
    const std::size_t y0 = uniform_below(rng, h - side + 1);
    auto crop = crop_sample(src, x0, y0, side, side, s.id + "_rc" + std::to_string(i), params);
    auto flipped = flip_horizontal(crop, params);
    out.push_back(std::move(crop));
    out.push_back(std::move(flipped));
  }
  return out;
}

struct TrainConfig {
  double lr = 1e-6;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t epochs = 1;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  double init_std = 0.01;
  bool subtract_mean = false;  // per-image mean removal; off by default
  std::size_t max_iterations = 0;  // 0 = no cap beyond epochs

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be finite and non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
      throw std::invalid_argument("weight_decay must be finite and non-negative");
    if (epochs == 0) throw std::invalid_argument("epochs must be positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(init_std > 0.0) || !std::isfinite(init_std)) throw std::invalid_argument("init_std must be positive");
  }
};

struct LossRecord {
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  std::string sample_id;
  double loss = 0.0;

  bool operator==(const LossRecord&) const = default;
};

template <typename T>
Tensor<T> prepare_input(const Sample& s, const TrainConfig& cfg) {
  auto img = s.model_input().template cast<T>();
  if (cfg.subtract_mean) {
    const T mean = static_cast<T>(img.sum() / static_cast<double>(img.size()));
    for (auto& v : img.values()) v -= mean;
  }
  return img;
}

/// Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[uniform_below(rng, i)]);
  return idx;
}

using TrainCallback = std::function<void(const LossRecord&)>;

/// Minibatch SGD on the Euclidean density loss. Sample order is reshuffled
/// every epoch from the "shuffle" stream of cfg.seed. One LossRecord per
/// sample visited; `iteration` counts optimizer steps. Throws NonFiniteError
/// naming the iteration if a loss is NaN or infinite.
template <typename T>
std::vector<LossRecord> train(Model<T>& model, std::span<const Sample> samples, const TrainConfig& cfg,
                              const TrainCallback& on_record = {}) {
  cfg.validate();
  if (samples.empty()) throw std::invalid_argument("train: no samples");
  auto params = model.parameters();
  const auto names = model.parameter_names();
  OptimizerState<T> opt(params, cfg.lr, cfg.momentum, cfg.weight_decay);
  auto rng = make_rng(cfg.seed, "shuffle");
  std::vector<LossRecord> history;
  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(samples.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_iterations != 0 && iteration >= cfg.max_iterations) return history;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::size_t n = end - start;
      std::vector<Tensor<T>> grads;
      for (std::size_t b = start; b < end; ++b) {
        const Sample& s = samples[order[b]];
        const auto trace = forward_trace(model, prepare_input<T>(s, cfg));
        auto lg = loss_and_grad(trace.output(), s.target, n);
        if (!std::isfinite(lg.loss))
          throw NonFiniteError("train: non-finite loss at iteration " + std::to_string(iteration) + " (sample " +
                               s.id + ")");
        auto g = backward(model, trace, lg.grad);
        if (grads.empty()) {
          grads = std::move(g);
        } else {
          for (std::size_t i = 0; i < grads.size(); ++i) {
            auto dst = grads[i].values();
            auto src = g[i].values();
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
          }
        }
        history.push_back({iteration, epoch, s.id, lg.loss});
        if (on_record) on_record(history.back());
      }
      try {
        sgd_step<T>(params, grads, opt, names);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string(e.what()) + " at iteration " + std::to_string(iteration));
      }
      ++iteration;
    }
  }
  return history;
}

/// CSV with header `iteration,epoch,sample_id,loss`.
inline std::string loss_history_csv(std::span<const LossRecord> history) {
  std::string out = "iteration,epoch,sample_id,loss\n";
  char buf[64];
  for (const auto& r : history) {
    const auto res = std::to_chars(buf, buf + sizeof buf, r.loss);  // shortest round-trip
    out += std::to_string(r.iteration) + "," + std::to_string(r.epoch) + "," + r.sample_id + "," +
           std::string(buf, res.ptr) + "\n";
  }
  return out;
}

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Seeded k-way partition of [0, n). Validation splits have n / k items,
/// the first n % k of them one extra; each fold trains on the rest.
inline std::vector<Fold> kfold_splits(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_splits: k must be at least 2");
  if (k > n) throw std::invalid_argument("kfold_splits: k exceeds the number of samples");
  auto rng = make_rng(seed, "kfold");
  const auto order = shuffled_indices(n, rng);
  std::vector<Fold> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = n / k + (f < n % k ? 1 : 0);
    folds[f].validation.assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                               order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    std::sort(folds[f].validation.begin(), folds[f].validation.end());
    pos += len;
  }
  for (std::size_t f = 0; f < k; ++f)
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) folds[f].train.insert(folds[f].train.end(), folds[g].validation.begin(), folds[g].validation.end());
  for (auto& f : folds) std::sort(f.train.begin(), f.train.end());
  return folds;
}

template <typename Item>
std::vector<Item> select(std::span<const Item> items, std::span<const std::size_t> indices) {
  std::vector<Item> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(items[i]);
  return out;
}

}  // namespace mscnn
