#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mscnn/density.hpp"
#include "mscnn/layers.hpp"
#include "mscnn/tensor.hpp"

namespace mscnn {

enum class LayerKind : std::uint8_t { Conv = 0, MSB = 1, MaxPool = 2 };

/// One row group of the architecture table. A plain conv is a single-branch
/// blob; `relu` marks the activation that follows it.
struct LayerDesc {
  LayerKind kind = LayerKind::Conv;
  std::vector<std::size_t> kernels;  // one entry per branch; empty for pooling
  std::size_t filters_per_branch = 0;
  bool relu = true;

  std::size_t out_channels(std::size_t in_channels) const {
    return kind == LayerKind::MaxPool ? in_channels : kernels.size() * filters_per_branch;
  }
  bool operator==(const LayerDesc&) const = default;
};

/// Parallel convolutions over the same input, concatenated in kernel order.
struct MSBSpec {
  std::vector<std::size_t> branch_kernels;
  std::size_t filters_per_branch = 0;
  std::size_t in_channels = 0;

  std::size_t out_channels() const { return branch_kernels.size() * filters_per_branch; }
  static std::size_t pad_for(std::size_t kernel) { return (kernel - 1) / 2; }
};

struct ModelSpec {
  std::size_t input_channels = 1;
  std::vector<LayerDesc> layers;

  /// Feature remap, three multi-scale stages separated by two 2x2 pools,
  /// and the 1x1 regression head.
  static ModelSpec mscnn(std::size_t input_channels = 1) {
    auto conv = [](std::size_t filters, std::size_t k) {
      return LayerDesc{LayerKind::Conv, {k}, filters, true};
    };
    auto msb = [](std::vector<std::size_t> ks, std::size_t filters) {
      return LayerDesc{LayerKind::MSB, std::move(ks), filters, true};
    };
    const LayerDesc pool{LayerKind::MaxPool, {}, 0, false};
    ModelSpec s;
    s.input_channels = input_channels;
    s.layers = {conv(64, 9),
                msb({9, 7, 5, 3}, 16),
                pool,
                msb({9, 7, 5, 3}, 32),
                msb({9, 7, 5, 3}, 32),
                pool,
                msb({7, 5, 3}, 64),
                msb({7, 5, 3}, 64),
                conv(1000, 1),
                conv(1, 1)};
    return s;
  }

  /// Same topology with every filter count except the single-channel output
  /// divided by `divisor` (rounded down, at least 1).
  ModelSpec scaled(std::size_t divisor) const {
    if (divisor == 0) throw std::invalid_argument("scaled: divisor must be positive");
    ModelSpec s = *this;
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
      auto& l = s.layers[i];
      if (l.kind == LayerKind::MaxPool || i + 1 == s.layers.size()) continue;
      l.filters_per_branch = std::max<std::size_t>(1, l.filters_per_branch / divisor);
    }
    return s;
  }

  void validate() const {
    if (input_channels == 0) throw std::invalid_argument("model spec: input_channels must be positive");
    if (layers.empty()) throw std::invalid_argument("model spec: no layers");
    std::size_t channels = input_channels;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string where = "model spec layer " + std::to_string(i) + ": ";
      if (l.kind == LayerKind::MaxPool) {
        if (!l.kernels.empty() || l.filters_per_branch != 0) throw std::invalid_argument(where + "pool has filters");
        continue;
      }
      if (l.kernels.empty()) throw std::invalid_argument(where + "no kernels");
      if (l.kind == LayerKind::Conv && l.kernels.size() != 1)
        throw std::invalid_argument(where + "conv must have exactly one kernel size");
      if (l.filters_per_branch == 0) throw std::invalid_argument(where + "zero filters");
      for (auto k : l.kernels)
        if (k == 0 || k % 2 == 0) throw std::invalid_argument(where + "kernel size " + std::to_string(k) + " is not odd");
      channels = l.out_channels(channels);
    }
    if (channels != 1) throw std::invalid_argument("model spec: final layer must emit one density channel");
    if (layers.back().kind == LayerKind::MaxPool) throw std::invalid_argument("model spec: ends with pooling");
  }

  /// Spatial reduction factor (2 per pooling layer).
  std::size_t output_stride() const {
    std::size_t s = 1;
    for (const auto& l : layers)
      if (l.kind == LayerKind::MaxPool) s *= 2;
    return s;
  }

  static std::string layer_name(const ModelSpec& spec, std::size_t index) {
    std::size_t conv = 0, msb = 0, pool = 0;
    for (std::size_t i = 0; i <= index; ++i) {
      switch (spec.layers[i].kind) {
        case LayerKind::Conv: ++conv; break;
        case LayerKind::MSB: ++msb; break;
        case LayerKind::MaxPool: ++pool; break;
      }
    }
    switch (spec.layers[index].kind) {
      case LayerKind::MSB: return "msb" + std::to_string(msb);
      case LayerKind::MaxPool: return "pool" + std::to_string(pool);
      case LayerKind::Conv: break;
    }
    return "conv" + std::to_string(conv);
  }

  bool operator==(const ModelSpec&) const = default;
};

/// Parameters of an instantiated spec. Convolutions are stored flat in layer
/// order; an MSB contributes one ConvLayer per branch.
template <typename T>
struct Model {
  ModelSpec spec;
  std::vector<ConvLayer<T>> convs;
  std::uint64_t seed = 0;

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& c : convs) {
      out.push_back(&c.weights);
      out.push_back(&c.bias);
    }
    return out;
  }

  std::vector<const Tensor<T>*> parameters() const {
    std::vector<const Tensor<T>*> out;
    for (const auto& c : convs) {
      out.push_back(&c.weights);
      out.push_back(&c.bias);
    }
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      const auto& l = spec.layers[i];
      if (l.kind == LayerKind::MaxPool) continue;
      const auto base = ModelSpec::layer_name(spec, i);
      for (auto k : l.kernels) {
        const auto prefix = l.kind == LayerKind::MSB ? base + ".k" + std::to_string(k) : base;
        names.push_back(prefix + ".weight");
        names.push_back(prefix + ".bias");
      }
    }
    return names;
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> m{spec, {}, seed};
    for (const auto& c : convs) m.convs.push_back({c.weights.template cast<U>(), c.bias.template cast<U>(), c.pad});
    return m;
  }

  bool operator==(const Model&) const = default;
};

/// Model with the spec's parameter shapes, all weights and biases zero.
template <typename T = float>
Model<T> zero_model(const ModelSpec& spec) {
  spec.validate();
  Model<T> m{spec, {}, 0};
  std::size_t channels = spec.input_channels;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::MaxPool) continue;
    for (auto k : l.kernels)
      m.convs.push_back({Tensor<T>({l.filters_per_branch, channels, k, k}), Tensor<T>({l.filters_per_branch}),
                         MSBSpec::pad_for(k)});
    channels = l.out_channels(channels);
  }
  return m;
}

/// Builds a model with N(0, init_std^2) weights and zero biases. Weights are
/// drawn in double precision so float and double models from one seed agree.
template <typename T = float>
Model<T> build_mscnn(const ModelSpec& spec, double init_std, std::uint64_t seed) {
  if (!(init_std > 0.0) || !std::isfinite(init_std)) throw std::invalid_argument("init_std must be positive");
  Model<T> m = zero_model<T>(spec);
  m.seed = seed;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, init_std);
  for (auto& c : m.convs)
    for (auto& w : c.weights.values()) w = static_cast<T>(normal(rng));
  return m;
}

/// Runs every branch on the same input, concatenates along channels in
/// branch order, then applies one ReLU to the concatenation.
template <typename T>
Tensor<T> msb_forward(const Tensor<T>& input, std::span<const ConvLayer<T>> branches, bool relu = true) {
  std::vector<const ConvLayer<T>*> ptrs;
  for (const auto& b : branches) ptrs.push_back(&b);
  auto out = detail::multi_conv_forward<T>(input, ptrs);
  if (relu) relu_inplace(out);
  return out;
}

/// Activations retained for the backward pass. activations[i] is the input
/// to layer i; activations.back() is the network output.
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> activations;
  std::vector<std::vector<std::size_t>> pool_argmax;  // indexed by layer, empty for conv layers

  const Tensor<T>& output() const { return activations.back(); }
};

namespace detail {

template <typename T>
void check_model_input(const Model<T>& model, const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != model.spec.input_channels)
    throw ShapeError("forward: expected " + std::to_string(model.spec.input_channels) + " x H x W input, got " +
                     shape_str(image.shape()));
  const std::size_t s = model.spec.output_stride();
  if (image.dim(1) % s != 0 || image.dim(2) % s != 0)
    throw ShapeError("forward: input " + shape_str(image.shape()) + " extents must be divisible by " +
                     std::to_string(s));
}

}  // namespace detail

template <typename T>
ForwardTrace<T> forward_trace(const Model<T>& model, const Tensor<T>& image) {
  detail::check_model_input(model, image);
  ForwardTrace<T> tr;
  tr.activations.reserve(model.spec.layers.size() + 1);
  tr.pool_argmax.resize(model.spec.layers.size());
  tr.activations.push_back(image);
  std::size_t conv = 0;
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
    const auto& l = model.spec.layers[i];
    const auto& in = tr.activations.back();
    if (l.kind == LayerKind::MaxPool) {
      auto r = maxpool2x2_forward(in);
      tr.pool_argmax[i] = std::move(r.argmax);
      tr.activations.push_back(std::move(r.output));
      continue;
    }
    const std::span<const ConvLayer<T>> branches(model.convs.data() + conv, l.kernels.size());
    tr.activations.push_back(msb_forward(in, branches, l.relu));
    conv += l.kernels.size();
  }
  return tr;
}

/// Density prediction of shape 1 x H/stride x W/stride.
template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& image) {
  detail::check_model_input(model, image);
  Tensor<T> act = image;
  std::size_t conv = 0;
  for (const auto& l : model.spec.layers) {
    if (l.kind == LayerKind::MaxPool) {
      act = maxpool2x2_forward(act).output;
      continue;
    }
    const std::span<const ConvLayer<T>> branches(model.convs.data() + conv, l.kernels.size());
    act = msb_forward(act, branches, l.relu);
    conv += l.kernels.size();
  }
  return act;
}

/// Gradients aligned with Model::parameters() (weight, bias per conv).
template <typename T>
std::vector<Tensor<T>> backward(const Model<T>& model, const ForwardTrace<T>& trace, const Tensor<T>& grad_out) {
  detail::require_same_shape(grad_out.shape(), trace.output().shape(), "backward grad_out");
  std::vector<Tensor<T>> grads(model.convs.size() * 2);
  std::size_t conv_end = model.convs.size();
  Tensor<T> g = grad_out;
  for (std::size_t li = model.spec.layers.size(); li-- > 0;) {
    const auto& l = model.spec.layers[li];
    const auto& in = trace.activations[li];
    if (l.kind == LayerKind::MaxPool) {
      g = maxpool2x2_backward(in.shape(), trace.pool_argmax[li], g);
      continue;
    }
    if (l.relu) g = relu_backward(trace.activations[li + 1], g);
    const std::size_t nb = l.kernels.size();
    const std::size_t conv_begin = conv_end - nb;
    std::vector<const ConvLayer<T>*> ptrs;
    for (std::size_t b = 0; b < nb; ++b) ptrs.push_back(&model.convs[conv_begin + b]);
    auto cg = detail::multi_conv_backward<T>(in, ptrs, g);
    for (std::size_t b = 0; b < nb; ++b) {
      grads[2 * (conv_begin + b)] = std::move(cg.grad_weights[b]);
      grads[2 * (conv_begin + b) + 1] = std::move(cg.grad_bias[b]);
    }
    g = std::move(cg.grad_input);
    conv_end = conv_begin;
  }
  return grads;
}

template <typename T>
std::vector<Tensor<T>> backward(const Model<T>& model, const Tensor<T>& image, const Tensor<T>& grad_out) {
  return backward(model, forward_trace(model, image), grad_out);
}

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  Tensor<T> grad;
};

/// Euclidean density loss for one sample of an N-sample batch:
/// loss = ||pred - target||^2 / (2N), grad = (pred - target) / N.
template <typename T>
LossAndGrad<T> loss_and_grad(const Tensor<T>& pred, const Tensor<T>& target, std::size_t batch_count = 1) {
  detail::require_same_shape(pred.shape(), target.shape(), "loss_and_grad");
  if (batch_count == 0) throw std::invalid_argument("loss_and_grad: batch count must be positive");
  const double n = static_cast<double>(batch_count);
  LossAndGrad<T> r{0.0, Tensor<T>(pred.shape())};
  double sq = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sq += d * d;
    r.grad[i] = static_cast<T>(d / n);
  }
  r.loss = sq / (2.0 * n);
  return r;
}

template <typename T>
LossAndGrad<T> loss_and_grad(const Tensor<T>& pred, const DensityMap& target, std::size_t batch_count = 1) {
  return loss_and_grad(pred, target.to_tensor<T>(), batch_count);
}

struct LayerParamCount {
  std::string name;
  std::string description;
  std::uint64_t weights = 0;
  std::uint64_t biases = 0;
  std::uint64_t total() const { return weights + biases; }
};

struct ParamReport {
  std::uint64_t total = 0;
  std::vector<LayerParamCount> layers;
};

/// Closed form sum over layers of Cout*Cin*K^2 + Cout.
inline ParamReport param_count(const ModelSpec& spec) {
  spec.validate();
  ParamReport r;
  std::size_t channels = spec.input_channels;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.kind == LayerKind::MaxPool) continue;
    LayerParamCount c;
    c.name = ModelSpec::layer_name(spec, i);
    std::string ks;
    for (auto k : l.kernels) {
      if (!ks.empty()) ks += '/';
      ks += std::to_string(k);
      c.weights += static_cast<std::uint64_t>(l.filters_per_branch) * channels * k * k;
      c.biases += l.filters_per_branch;
    }
    c.description = std::to_string(channels) + "->" +
                    (l.kernels.size() > 1 ? std::to_string(l.kernels.size()) + "x" : std::string{}) +
                    std::to_string(l.filters_per_branch) + " k" + ks;
    r.total += c.total();
    r.layers.push_back(std::move(c));
    channels = l.out_channels(channels);
  }
  return r;
}

/// Counts the elements actually held by the model's parameter tensors.
template <typename T>
std::uint64_t param_count(const Model<T>& model) {
  std::uint64_t n = 0;
  for (const auto* p : model.parameters()) n += p->size();
  return n;
}

}  // namespace mscnn
