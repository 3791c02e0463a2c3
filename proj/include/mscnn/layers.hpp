#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mscnn/gemm.hpp"
#include "mscnn/tensor.hpp"

namespace mscnn {

/// Stride-1 zero-padded convolution. weights: Cout x Cin x K x K, bias: Cout.
template <typename T>
struct ConvLayer {
  Tensor<T> weights;
  Tensor<T> bias;
  std::size_t pad = 0;

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  std::size_t kernel() const { return weights.dim(2); }

  bool operator==(const ConvLayer&) const = default;
};

template <typename T>
struct ConvGrads {
  Tensor<T> grad_input;
  Tensor<T> grad_weights;
  Tensor<T> grad_bias;
};

namespace detail {

template <typename T>
void check_conv_layer(const ConvLayer<T>& layer) {
  const auto& ws = layer.weights.shape();
  if (ws.size() != 4 || ws[2] != ws[3])
    throw ShapeError("conv2d: weights must be Cout x Cin x K x K, got " + shape_str(ws));
  if (layer.bias.shape() != Shape{ws[0]})
    throw ShapeError("conv2d: bias shape " + shape_str(layer.bias.shape()) + " does not match weights " +
                     shape_str(ws));
}

// Shared geometry of one or more convolutions applied to the same input and
// producing identical output extents. The input is zero padded once by the
// largest pad; every kernel tap then becomes a constant shift into that
// buffer, so each tap is a single GEMM with no im2col matrix:
//   out_full[o][q] += sum_c w[o][c][i][j] * padded[c][q + si * wp + sj]
// where q = y * wp + x runs over a row pitch of wp; columns x >= wout are
// scratch and get dropped.
struct ShiftGeometry {
  std::size_t cin = 0, h = 0, w = 0;
  std::size_t pad = 0;      // common padding of the buffer
  std::size_t span = 0;     // taps per axis covered by all branches
  std::size_t hout = 0, wout = 0;
  std::size_t wp = 0;       // padded row pitch
  std::size_t plane = 0;    // per-channel stride of the padded buffer
  std::size_t n = 0;        // hout * wp
  std::vector<std::size_t> offset;  // per branch: pad - branch pad
  std::vector<std::size_t> row;     // per branch: first output channel
  std::size_t cout = 0;
};

template <typename T>
ShiftGeometry shift_geometry(const Tensor<T>& input, std::span<const ConvLayer<T>* const> branches) {
  require_rank3(input, "conv2d");
  if (branches.empty()) throw ShapeError("conv2d: no kernels");
  ShiftGeometry g;
  g.cin = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  for (const auto* b : branches) {
    check_conv_layer(*b);
    if (b->in_channels() != g.cin)
      throw ShapeError("conv2d: input " + shape_str(input.shape()) + " has " + std::to_string(g.cin) +
                       " channels but weights " + shape_str(b->weights.shape()) + " expect " +
                       std::to_string(b->in_channels()));
    if (g.h + 2 * b->pad < b->kernel() || g.w + 2 * b->pad < b->kernel())
      throw ShapeError("conv2d: input " + shape_str(input.shape()) + " too small for weights " +
                       shape_str(b->weights.shape()) + " with pad " + std::to_string(b->pad));
    g.pad = std::max(g.pad, b->pad);
  }
  g.hout = g.h + 2 * branches[0]->pad - branches[0]->kernel() + 1;
  g.wout = g.w + 2 * branches[0]->pad - branches[0]->kernel() + 1;
  for (const auto* b : branches) {
    if (g.h + 2 * b->pad - b->kernel() + 1 != g.hout || g.w + 2 * b->pad - b->kernel() + 1 != g.wout)
      throw ShapeError("conv2d: branch weights " + shape_str(b->weights.shape()) + " with pad " +
                       std::to_string(b->pad) + " disagree on output extents");
    g.offset.push_back(g.pad - b->pad);
    g.row.push_back(g.cout);
    g.cout += b->out_channels();
    g.span = std::max(g.span, g.offset.back() + b->kernel());
  }
  g.wp = g.w + 2 * g.pad;
  g.n = g.hout * g.wp;
  g.plane = (g.hout + g.span) * g.wp + g.span;
  return g;
}

template <typename T>
std::vector<T> pad_input(const Tensor<T>& input, const ShiftGeometry& g) {
  std::vector<T> buf(g.cin * g.plane, T{0});
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t y = 0; y < g.h; ++y) {
      const T* src = input.data() + (c * g.h + y) * g.w;
      std::copy(src, src + g.w, buf.data() + c * g.plane + (y + g.pad) * g.wp + g.pad);
    }
  return buf;
}

// Maximal runs [first, last) of consecutive branches whose kernel covers the
// tap (si, sj) of the shared buffer.
template <typename T, typename F>
void for_each_tap_run(std::span<const ConvLayer<T>* const> branches, const ShiftGeometry& g, F&& f) {
  auto covers = [&](std::size_t b, std::size_t si, std::size_t sj) {
    const std::size_t o = g.offset[b], k = branches[b]->kernel();
    return si >= o && si < o + k && sj >= o && sj < o + k;
  };
  for (std::size_t si = 0; si < g.span; ++si)
    for (std::size_t sj = 0; sj < g.span; ++sj)
      for (std::size_t b = 0; b < branches.size();) {
        if (!covers(b, si, sj)) {
          ++b;
          continue;
        }
        std::size_t e = b + 1;
        while (e < branches.size() && covers(e, si, sj)) ++e;
        f(si, sj, b, e);
        b = e;
      }
}

// Packs tap (si, sj) of branches [first, last) into a rows x cin matrix.
template <typename T>
std::size_t pack_tap(std::span<const ConvLayer<T>* const> branches, const ShiftGeometry& g, std::size_t si,
                     std::size_t sj, std::size_t first, std::size_t last, std::vector<T>& out) {
  std::size_t rows = 0;
  for (std::size_t b = first; b < last; ++b) rows += branches[b]->out_channels();
  out.resize(rows * g.cin);
  T* dst = out.data();
  for (std::size_t b = first; b < last; ++b) {
    const auto& wt = branches[b]->weights;
    const std::size_t k = wt.dim(2), i = si - g.offset[b], j = sj - g.offset[b];
    for (std::size_t o = 0; o < wt.dim(0); ++o)
      for (std::size_t c = 0; c < g.cin; ++c) *dst++ = wt[((o * g.cin + c) * k + i) * k + j];
  }
  return rows;
}

// Forward of several same-input convolutions, concatenated along channels in
// branch order (bias included, no activation).
template <typename T>
Tensor<T> multi_conv_forward(const Tensor<T>& input, std::span<const ConvLayer<T>* const> branches) {
  const auto g = shift_geometry(input, branches);
  Tensor<T> out({g.cout, g.hout, g.wout});
  const std::size_t plane_out = g.hout * g.wout;

  if (branches.size() == 1 && branches[0]->kernel() == 1 && branches[0]->pad == 0) {
    detail::gemm(false, false, g.cout, plane_out, g.cin, T{1}, branches[0]->weights.data(), g.cin, input.data(),
                 plane_out, T{0}, out.data(), plane_out);
  } else {
    const auto buf = pad_input(input, g);
    std::vector<T> full(g.cout * g.n, T{0});
    std::vector<T> packed;
    for_each_tap_run(branches, g, [&](std::size_t si, std::size_t sj, std::size_t first, std::size_t last) {
      const std::size_t rows = pack_tap(branches, g, si, sj, first, last, packed);
      detail::gemm(false, false, rows, g.n, g.cin, T{1}, packed.data(), g.cin, buf.data() + si * g.wp + sj, g.plane,
                   T{1}, full.data() + g.row[first] * g.n, g.n);
    });
    for (std::size_t o = 0; o < g.cout; ++o)
      for (std::size_t y = 0; y < g.hout; ++y) {
        const T* src = full.data() + o * g.n + y * g.wp;
        std::copy(src, src + g.wout, out.data() + (o * g.hout + y) * g.wout);
      }
  }
  for (std::size_t b = 0; b < branches.size(); ++b)
    for (std::size_t o = 0; o < branches[b]->out_channels(); ++o) {
      const T bias = branches[b]->bias[o];
      T* p = out.data() + (g.row[b] + o) * plane_out;
      for (std::size_t i = 0; i < plane_out; ++i) p[i] += bias;
    }
  return out;
}

template <typename T>
struct MultiConvGrads {
  Tensor<T> grad_input;
  std::vector<Tensor<T>> grad_weights;
  std::vector<Tensor<T>> grad_bias;
};

template <typename T>
MultiConvGrads<T> multi_conv_backward(const Tensor<T>& input, std::span<const ConvLayer<T>* const> branches,
                                      const Tensor<T>& grad_out) {
  const auto g = shift_geometry(input, branches);
  require_same_shape(grad_out.shape(), Shape{g.cout, g.hout, g.wout}, "conv2d_backward grad_out");
  const std::size_t plane_out = g.hout * g.wout;

  MultiConvGrads<T> r{Tensor<T>(input.shape()), {}, {}};
  for (std::size_t b = 0; b < branches.size(); ++b) {
    r.grad_weights.emplace_back(branches[b]->weights.shape());
    Tensor<T> gb(branches[b]->bias.shape());
    for (std::size_t o = 0; o < gb.size(); ++o) {
      T acc{0};
      const T* p = grad_out.data() + (g.row[b] + o) * plane_out;
      for (std::size_t i = 0; i < plane_out; ++i) acc += p[i];
      gb[o] = acc;
    }
    r.grad_bias.push_back(std::move(gb));
  }

  if (branches.size() == 1 && branches[0]->kernel() == 1 && branches[0]->pad == 0) {
    detail::gemm(false, true, g.cout, g.cin, plane_out, T{1}, grad_out.data(), plane_out, input.data(), plane_out,
                 T{0}, r.grad_weights[0].data(), g.cin);
    detail::gemm(true, false, g.cin, plane_out, g.cout, T{1}, branches[0]->weights.data(), g.cin, grad_out.data(),
                 plane_out, T{0}, r.grad_input.data(), plane_out);
    return r;
  }

  const auto buf = pad_input(input, g);
  std::vector<T> full(g.cout * g.n, T{0});
  for (std::size_t o = 0; o < g.cout; ++o)
    for (std::size_t y = 0; y < g.hout; ++y) {
      const T* src = grad_out.data() + (o * g.hout + y) * g.wout;
      std::copy(src, src + g.wout, full.data() + o * g.n + y * g.wp);
    }
  std::vector<T> grad_buf(g.cin * g.plane, T{0});
  std::vector<T> packed, grad_packed;
  for_each_tap_run(branches, g, [&](std::size_t si, std::size_t sj, std::size_t first, std::size_t last) {
    const std::size_t rows = pack_tap(branches, g, si, sj, first, last, packed);
    const T* go = full.data() + g.row[first] * g.n;
    const std::size_t shift = si * g.wp + sj;
    grad_packed.resize(rows * g.cin);
    detail::gemm(false, true, rows, g.cin, g.n, T{1}, go, g.n, buf.data() + shift, g.plane, T{0}, grad_packed.data(),
                 g.cin);
    detail::gemm(true, false, g.cin, g.n, rows, T{1}, packed.data(), g.cin, go, g.n, T{1}, grad_buf.data() + shift,
                 g.plane);
    const T* src = grad_packed.data();
    for (std::size_t b = first; b < last; ++b) {
      auto& gw = r.grad_weights[b];
      const std::size_t k = gw.dim(2), i = si - g.offset[b], j = sj - g.offset[b];
      for (std::size_t o = 0; o < gw.dim(0); ++o)
        for (std::size_t c = 0; c < g.cin; ++c) gw[((o * g.cin + c) * k + i) * k + j] = *src++;
    }
  });
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t y = 0; y < g.h; ++y) {
      const T* src = grad_buf.data() + c * g.plane + (y + g.pad) * g.wp + g.pad;
      std::copy(src, src + g.w, r.grad_input.data() + (c * g.h + y) * g.w);
    }
  return r;
}

}  // namespace detail

/// out[o][y][x] = bias[o] + sum_{c,i,j} w[o][c][i][j] * padded_in[c][y+i][x+j]
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvLayer<T>& layer) {
  const ConvLayer<T>* one[] = {&layer};
  return detail::multi_conv_forward<T>(input, one);
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvLayer<T>& layer, const Tensor<T>& grad_out) {
  const ConvLayer<T>* one[] = {&layer};
  auto r = detail::multi_conv_backward<T>(input, one, grad_out);
  return {std::move(r.grad_input), std::move(r.grad_weights[0]), std::move(r.grad_bias[0])};
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return out;
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.values()) v = v > T{0} ? v : T{0};
}

/// Subgradient at exactly zero is zero.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  detail::require_same_shape(grad_out.shape(), input.shape(), "relu_backward");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(input[i] > T{0})) g[i] = T{0};
  return g;
}

template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output cell
};

/// Disjoint 2x2 max pooling. Ties go to the first maximum in row-major order.
template <typename T>
PoolResult<T> maxpool2x2_forward(const Tensor<T>& input) {
  detail::require_rank3(input, "maxpool2x2");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("maxpool2x2: spatial extents must be even, got " + shape_str(input.shape()));
  PoolResult<T> r{Tensor<T>({c, h / 2, w / 2}), std::vector<std::size_t>(c * (h / 2) * (w / 2))};
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; y += 2) {
      for (std::size_t x = 0; x < w; x += 2, ++o) {
        const std::size_t base = (ch * h + y) * w + x;
        std::size_t best = base;
        for (std::size_t cand : {base + 1, base + w, base + w + 1})
          if (input[cand] > input[best]) best = cand;
        r.output[o] = input[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool2x2_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                              const Tensor<T>& grad_out) {
  if (argmax.size() != grad_out.size())
    throw ShapeError("maxpool2x2_backward: " + std::to_string(argmax.size()) + " indices for grad_out " +
                     shape_str(grad_out.shape()));
  Tensor<T> g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

/// Stacks parts along the channel axis in argument order.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no parts");
  for (const auto& p : parts) detail::require_rank3(p, "concat_channels");
  const std::size_t h = parts[0].dim(1), w = parts[0].dim(2);
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.dim(1) != h || p.dim(2) != w)
      throw ShapeError("concat_channels: part " + shape_str(p.shape()) + " does not match spatial extents of " +
                       shape_str(parts[0].shape()));
    channels += p.dim(0);
  }
  Tensor<T> out({channels, h, w});
  T* dst = out.data();
  for (const auto& p : parts) dst = std::copy(p.data(), p.data() + p.size(), dst);
  return out;
}

/// Inverse of concat_channels: splits along channels into the given counts.
template <typename T>
std::vector<Tensor<T>> slice_channels(const Tensor<T>& t, std::span<const std::size_t> channel_counts) {
  detail::require_rank3(t, "slice_channels");
  std::size_t total = 0;
  for (auto c : channel_counts) total += c;
  if (total != t.dim(0))
    throw ShapeError("slice_channels: counts sum to " + std::to_string(total) + " but tensor is " +
                     shape_str(t.shape()));
  const std::size_t plane = t.dim(1) * t.dim(2);
  std::vector<Tensor<T>> parts;
  parts.reserve(channel_counts.size());
  const T* src = t.data();
  for (auto c : channel_counts) {
    std::vector<T> data(src, src + c * plane);
    parts.emplace_back(Shape{c, t.dim(1), t.dim(2)}, std::move(data));
    src += c * plane;
  }
  return parts;
}

}  // namespace mscnn
