#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mscnn/density.hpp"
#include "mscnn/rng.hpp"
#include "mscnn/tensor.hpp"

namespace mscnn {

namespace fs = std::filesystem;

/// Malformed or truncated file content. `offset` is the byte position where
/// decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// 8-bit grayscale raster, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const GrayImage&) const = default;
};

inline std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

namespace detail {

class HeaderReader {
 public:
  HeaderReader(std::span<const std::uint8_t> bytes, std::size_t start) : bytes_(bytes), pos_(start) {}

  std::size_t pos() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const auto c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (std::size_t{1} << 31)) throw FormatError(std::string("PGM ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw FormatError(std::string("PGM: expected ") + what, start);
    return v;
  }

  void single_whitespace() {
    if (pos_ >= bytes_.size()) throw FormatError("PGM: header ends before pixel data", pos_);
    const auto c = bytes_[pos_];
    if (!(c == ' ' || c == '\t' || c == '\n' || c == '\r'))
      throw FormatError("PGM: expected whitespace after maxval", pos_);
    ++pos_;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Decodes a binary (P5) PGM with maxval <= 255.
inline GrayImage parse_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("PGM: missing P5 magic", 0);
  detail::HeaderReader r(bytes, 2);
  GrayImage img;
  img.width = r.number("width");
  img.height = r.number("height");
  r.skip_space_and_comments();
  const std::size_t maxval_at = r.pos();
  const std::size_t maxval = r.number("maxval");
  if (img.width == 0 || img.height == 0) throw FormatError("PGM: zero image extent", 2);
  if (maxval == 0 || maxval > 255) throw FormatError("PGM: only 8-bit maxval (1..255) is supported", maxval_at);
  r.single_whitespace();
  const std::size_t data_at = r.pos();
  const std::size_t n = img.width * img.height;
  if (bytes.size() - data_at < n)
    throw FormatError("PGM: truncated payload, expected " + std::to_string(n) + " bytes", bytes.size());
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(data_at),
                    bytes.begin() + static_cast<std::ptrdiff_t>(data_at + n));
  if (maxval != 255)
    for (auto& p : img.pixels) {
      if (p > maxval) throw FormatError("PGM: pixel exceeds maxval", data_at + static_cast<std::size_t>(&p - img.pixels.data()));
      p = static_cast<std::uint8_t>(std::lround(255.0 * p / static_cast<double>(maxval)));
    }
  return img;
}

inline GrayImage read_pgm(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_pgm(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline void write_pgm(const fs::path& path, const GrayImage& img) { write_file_bytes(path, encode_pgm(img)); }

/// 1 x H x W tensor with p -> p / 255.
inline Tensor<float> to_tensor(const GrayImage& img) {
  Tensor<float> t({1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return t;
}

inline Tensor<float> load_image_grayscale(const fs::path& path) { return to_tensor(read_pgm(path)); }

// --- DMAP: "DMAP 1\n<width> <height>\n" + width*height little-endian f32 ---

namespace detail {

inline void append_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t load_le32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

inline void append_f32(std::string& out, float v) { append_le32(out, std::bit_cast<std::uint32_t>(v)); }

inline float load_f32(const std::uint8_t* p) { return std::bit_cast<float>(load_le32(p)); }

}  // namespace detail

inline std::string encode_dmap(const DensityMap& map) {
  std::string out = "DMAP 1\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n";
  out.reserve(out.size() + 4 * map.cells.size());
  for (float v : map.cells) detail::append_f32(out, v);
  return out;
}

inline DensityMap parse_dmap(std::span<const std::uint8_t> bytes) {
  constexpr std::string_view magic = "DMAP 1\n";
  if (bytes.size() < magic.size() || std::memcmp(bytes.data(), magic.data(), magic.size()) != 0)
    throw FormatError("DMAP: missing \"DMAP 1\" header", 0);
  std::size_t pos = magic.size();
  auto read_uint = [&](char terminator, const char* what) {
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (std::size_t{1} << 31)) throw FormatError(std::string("DMAP: ") + what + " too large", start);
      ++pos;
    }
    if (pos == start) throw FormatError(std::string("DMAP: expected ") + what, start);
    if (pos >= bytes.size() || bytes[pos] != terminator)
      throw FormatError(std::string("DMAP: malformed header after ") + what, pos);
    ++pos;
    return v;
  };
  const std::size_t w = read_uint(' ', "width");
  const std::size_t h = read_uint('\n', "height");
  const std::size_t payload = 4 * w * h;
  if (bytes.size() - pos < payload) throw FormatError("DMAP: truncated payload", bytes.size());
  if (bytes.size() - pos > payload) throw FormatError("DMAP: trailing bytes", pos + payload);
  DensityMap map(w, h);
  for (std::size_t i = 0; i < map.cells.size(); ++i) map.cells[i] = detail::load_f32(bytes.data() + pos + 4 * i);
  return map;
}

inline void write_dmap(const fs::path& path, const DensityMap& map) { write_file_bytes(path, encode_dmap(map)); }

inline DensityMap read_dmap(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_dmap(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

// --- annotations: {"image": "<relative path>", "points": [[x, y], ...]} ---

struct AnnotationFile {
  std::string image;
  std::vector<Point> points;

  bool operator==(const AnnotationFile&) const = default;
};

inline nlohmann::json to_json(const AnnotationFile& a) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : a.points) pts.push_back({p.x, p.y});
  return {{"image", a.image}, {"points", pts}};
}

inline AnnotationFile annotation_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("image") || !j.at("image").is_string())
    throw std::invalid_argument("annotation: missing string field \"image\"");
  if (!j.contains("points") || !j.at("points").is_array())
    throw std::invalid_argument("annotation: missing array field \"points\"");
  AnnotationFile a;
  a.image = j.at("image").get<std::string>();
  const auto& pts = j.at("points");
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& p = pts[i];
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
      throw std::invalid_argument("annotation: point " + std::to_string(i) + " is not an [x, y] pair");
    a.points.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  return a;
}

inline AnnotationFile read_annotation(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return annotation_from_json(nlohmann::json::parse(in));
  } catch (const std::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

inline void write_annotation(const fs::path& path, const AnnotationFile& a) {
  write_file_bytes(path, to_json(a).dump(2) + "\n");
}

// --- datasets: a directory of <id>.json annotation files ---

struct DatasetEntry {
  std::string id;
  GrayImage image;
  HeadAnnotations annotations;
};

inline DatasetEntry load_entry(const fs::path& annotation_path) {
  const auto ann = read_annotation(annotation_path);
  DatasetEntry e;
  e.id = annotation_path.stem().string();
  e.image = read_pgm(annotation_path.parent_path() / ann.image);
  e.annotations = {ann.points, e.image.width, e.image.height};
  try {
    e.annotations.validate();
  } catch (const std::exception& ex) {
    throw std::invalid_argument(annotation_path.string() + ": " + ex.what());
  }
  return e;
}

/// Loads every *.json in `dir` (sorted by file name).
inline std::vector<DatasetEntry> load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& de : fs::directory_iterator(dir))
    if (de.is_regular_file() && de.path().extension() == ".json") files.push_back(de.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no annotation files in " + dir.string());
  std::vector<DatasetEntry> entries;
  entries.reserve(files.size());
  for (const auto& f : files) entries.push_back(load_entry(f));
  return entries;
}

inline void write_dataset(const fs::path& dir, const std::vector<DatasetEntry>& entries) {
  fs::create_directories(dir);
  for (const auto& e : entries) {
    const std::string image_name = e.id + ".pgm";
    write_pgm(dir / image_name, e.image);
    write_annotation(dir / (e.id + ".json"), {image_name, e.annotations.points});
  }
}

// --- synthetic scenes ---

struct SyntheticSceneConfig {
  std::size_t width = 64;
  std::size_t height = 64;
  std::size_t min_heads = 3;
  std::size_t max_heads = 10;
  double dot_radius = 2.5;
  double dot_intensity = 1.0;  // in [0, 1]
  double noise_level = 0.05;   // background drawn uniformly from [0, noise_level)
  std::uint64_t seed = 0;

  void validate() const {
    if (width == 0 || height == 0) throw std::invalid_argument("synthetic: image size must be positive");
    if (min_heads > max_heads) throw std::invalid_argument("synthetic: min_heads exceeds max_heads");
    if (!(dot_radius > 0.0)) throw std::invalid_argument("synthetic: dot_radius must be positive");
    if (!(dot_intensity >= 0.0 && dot_intensity <= 1.0))
      throw std::invalid_argument("synthetic: dot_intensity must lie in [0, 1]");
    if (!(noise_level >= 0.0 && noise_level <= 1.0))
      throw std::invalid_argument("synthetic: noise_level must lie in [0, 1]");
  }
};

/// Bright soft discs at uniformly drawn head positions over uniform noise.
inline std::vector<DatasetEntry> generate_synthetic_dataset(const SyntheticSceneConfig& cfg, std::size_t count) {
  cfg.validate();
  auto rng = make_rng(cfg.seed, "synth");
  std::vector<DatasetEntry> out;
  out.reserve(count);
  const int digits = std::max<int>(3, static_cast<int>(std::to_string(count).size()));
  for (std::size_t n = 0; n < count; ++n) {
    DatasetEntry e;
    std::string idx = std::to_string(n);
    e.id = "synth_" + std::string(static_cast<std::size_t>(digits) - std::min(idx.size(), std::size_t(digits)), '0') + idx;
    const std::size_t heads = cfg.min_heads + uniform_below(rng, cfg.max_heads - cfg.min_heads + 1);
    e.annotations.width = cfg.width;
    e.annotations.height = cfg.height;
    for (std::size_t i = 0; i < heads; ++i) {
      const double x = uniform_unit(rng) * static_cast<double>(cfg.width);
      const double y = uniform_unit(rng) * static_cast<double>(cfg.height);
      e.annotations.points.push_back({x, y});
    }
    std::vector<double> canvas(cfg.width * cfg.height);
    for (auto& v : canvas) v = cfg.noise_level > 0.0 ? uniform_unit(rng) * cfg.noise_level : 0.0;
    const double r = cfg.dot_radius;
    for (const auto& p : e.annotations.points) {
      const auto y0 = static_cast<std::ptrdiff_t>(std::floor(p.y - r));
      const auto y1 = static_cast<std::ptrdiff_t>(std::ceil(p.y + r));
      const auto x0 = static_cast<std::ptrdiff_t>(std::floor(p.x - r));
      const auto x1 = static_cast<std::ptrdiff_t>(std::ceil(p.x + r));
      for (auto y = std::max<std::ptrdiff_t>(0, y0); y <= std::min<std::ptrdiff_t>(cfg.height - 1, y1); ++y)
        for (auto x = std::max<std::ptrdiff_t>(0, x0); x <= std::min<std::ptrdiff_t>(cfg.width - 1, x1); ++x) {
          // pixel centers at integer coordinates, matching density rendering
          const double dx = static_cast<double>(x) - p.x, dy = static_cast<double>(y) - p.y;
          const double q = (dx * dx + dy * dy) / (r * r);
          if (q >= 1.0) continue;
          auto& c = canvas[static_cast<std::size_t>(y) * cfg.width + static_cast<std::size_t>(x)];
          c = std::max(c, cfg.dot_intensity * (1.0 - q));
        }
    }
    e.image = {cfg.width, cfg.height, std::vector<std::uint8_t>(canvas.size())};
    for (std::size_t i = 0; i < canvas.size(); ++i)
      e.image.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(canvas[i], 0.0, 1.0) * 255.0));
    out.push_back(std::move(e));
  }
  return out;
}

/// Locale-independent fixed-point formatting.
inline std::string format_fixed(double v, int precision) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, precision);
  return std::string(buf, r.ptr);
}

}  // namespace mscnn
