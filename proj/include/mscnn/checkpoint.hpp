#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mscnn/io.hpp"
#include "mscnn/model.hpp"

namespace mscnn {

// Checkpoint layout, all integers little-endian u32:
//   "MSCN1"
//   input_channels, layer_count
//   per layer: kind, relu, filters_per_branch, branch_count, kernel[branch_count]
//   tensor_count
//   per tensor: rank, extent[rank], then numel little-endian f32 values
// Tensors are stored in Model::parameters() order (weight, bias per conv).

inline constexpr std::string_view kCheckpointMagic = "MSCN1";

template <typename T>
std::string encode_checkpoint(const Model<T>& model) {
  std::string out(kCheckpointMagic);
  const auto u32 = [&](std::size_t v) { detail::append_le32(out, static_cast<std::uint32_t>(v)); };
  u32(model.spec.input_channels);
  u32(model.spec.layers.size());
  for (const auto& l : model.spec.layers) {
    u32(static_cast<std::uint32_t>(l.kind));
    u32(l.relu ? 1 : 0);
    u32(l.filters_per_branch);
    u32(l.kernels.size());
    for (auto k : l.kernels) u32(k);
  }
  const auto params = model.parameters();
  u32(params.size());
  for (const auto* p : params) {
    u32(p->rank());
    for (auto e : p->shape()) u32(e);
    for (T v : p->values()) detail::append_f32(out, static_cast<float>(v));
  }
  return out;
}

namespace detail {

class CheckpointReader {
 public:
  explicit CheckpointReader(std::span<const std::uint8_t> b) : bytes_(b) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    const auto v = load_le32(bytes_.data() + pos_);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) {
    need(4, what);
    const auto v = load_f32(bytes_.data() + pos_);
    pos_ += 4;
    return v;
  }
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint: truncated ") + what, pos_);
  }
  std::size_t pos() const { return pos_; }
  void skip(std::size_t n) { pos_ += n; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Model<float> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0)
    throw FormatError("checkpoint: missing MSCN1 magic", 0);
  detail::CheckpointReader r(bytes);
  r.skip(kCheckpointMagic.size());
  Model<float> m;
  m.spec.input_channels = r.u32("input channels");
  const std::uint32_t layers = r.u32("layer count");
  if (layers > 4096) throw FormatError("checkpoint: implausible layer count", r.pos() - 4);
  for (std::uint32_t i = 0; i < layers; ++i) {
    LayerDesc l;
    const std::size_t kind_at = r.pos();
    const auto kind = r.u32("layer kind");
    if (kind > static_cast<std::uint32_t>(LayerKind::MaxPool)) throw FormatError("checkpoint: unknown layer kind", kind_at);
    l.kind = static_cast<LayerKind>(kind);
    l.relu = r.u32("relu flag") != 0;
    l.filters_per_branch = r.u32("filter count");
    const auto branches = r.u32("branch count");
    if (branches > 64) throw FormatError("checkpoint: implausible branch count", r.pos() - 4);
    for (std::uint32_t b = 0; b < branches; ++b) l.kernels.push_back(r.u32("kernel size"));
    m.spec.layers.push_back(std::move(l));
  }
  try {
    m.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: ") + e.what(), r.pos());
  }
  // expected parameter shapes follow from the spec
  const auto expected = zero_model<float>(m.spec);
  const std::size_t count_at = r.pos();
  const auto tensors = r.u32("tensor count");
  if (tensors != expected.convs.size() * 2)
    throw FormatError("checkpoint: tensor count " + std::to_string(tensors) + " does not match spec", count_at);
  m.convs = expected.convs;
  auto params = m.parameters();
  for (auto* p : params) {
    const std::size_t at = r.pos();
    const auto rank = r.u32("tensor rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank && d < 8; ++d) shape.push_back(r.u32("tensor extent"));
    if (shape != p->shape())
      throw FormatError("checkpoint: tensor shape " + shape_str(shape) + " expected " + shape_str(p->shape()), at);
    r.need(4 * p->size(), "tensor data");
    for (auto& v : p->values()) v = r.f32("tensor data");
  }
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes", r.pos());
  return m;
}

template <typename T>
void write_checkpoint(const fs::path& path, const Model<T>& model) {
  write_file_bytes(path, encode_checkpoint(model));
}

inline Model<float> read_checkpoint(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace mscnn
