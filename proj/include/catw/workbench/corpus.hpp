#pragma once

// Procedural identity corpus. Each identity is a fixed (shape, palette,
// background texture) tuple; individual images vary offset, scale and pose.

#include <array>
#include <cmath>
#include <json.hpp>
#include <numbers>
#include <string>
#include <vector>

#include "catw/tensor.hpp"

namespace catw {

enum class Split { reference, protect_target, extra_reference };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::reference: return "reference";
    case Split::protect_target: return "protect_target";
    case Split::extra_reference: return "extra_reference";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "reference") return Split::reference;
  if (s == "protect_target") return Split::protect_target;
  if (s == "extra_reference") return Split::extra_reference;
  throw ConfigError("unknown split " + s);
}

struct CorpusSpec {
  std::string kind = "synthetic";  // synthetic | folder
  std::size_t identities = 5;
  std::size_t images_per_identity = 12;
  std::size_t size = 32;
  std::string path;
  std::array<std::size_t, 3> split{4, 4, 4};  // reference, protect_target, extra_reference

  void validate() const {
    if (kind != "synthetic" && kind != "folder") throw ConfigError("corpus kind must be synthetic or folder, got " + kind);
    if (kind == "folder" && path.empty()) throw ConfigError("folder corpus needs a path");
    if (size == 0) throw ConfigError("corpus size must be positive");
    if (kind == "synthetic" && (identities == 0 || images_per_identity == 0))
      throw ConfigError("synthetic corpus needs at least one identity and image");
    if (split[0] + split[1] + split[2] != images_per_identity)
      throw ConfigError("split sizes " + std::to_string(split[0]) + "/" + std::to_string(split[1]) + "/" +
                        std::to_string(split[2]) + " do not sum to images_per_identity " +
                        std::to_string(images_per_identity));
  }
};

struct CorpusItem {
  std::string id;
  std::size_t identity = 0;
  Split split = Split::reference;
};

/// Images are N×3×S×S in [0,1], quantized to 8-bit levels.
struct Corpus {
  std::size_t size = 0;
  std::vector<CorpusItem> items;
  Tensor<float> images;

  std::vector<std::size_t> select(std::size_t identity, Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].identity == identity && items[i].split == split) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> select(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].split == split) out.push_back(i);
    return out;
  }
  std::size_t identity_count() const {
    std::size_t n = 0;
    for (const auto& it : items) n = std::max(n, it.identity + 1);
    return n;
  }
  Tensor<float> gather(const std::vector<std::size_t>& idx) const;

  nlohmann::json index_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& it : items) rows.push_back({{"id", it.id}, {"identity", it.identity}, {"split", split_name(it.split)}});
    return {{"size", size}, {"items", rows}};
  }
};

inline Tensor<float> Corpus::gather(const std::vector<std::size_t>& idx) const {
  if (idx.empty()) throw ContractError("gather of an empty selection");
  const std::size_t per = 3 * size * size;
  Tensor<float> out(Shape{idx.size(), 3, size, size});
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(images.data() + idx[i] * per, per, out.data() + i * per);
  return out;
}

inline float quantize8(double v) { return float(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

namespace detail {

struct IdentityStyle {
  int shape;
  std::array<double, 3> fg, bg_a, bg_b;
  double texture_angle;
  double texture_freq;
};

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s, hp = std::fmod(h, 1.0) * 6.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  std::array<double, 3> rgb{};
  switch (int(hp)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (auto& ch : rgb) ch += v - c;
  return rgb;
}

inline IdentityStyle make_style(std::size_t identity, std::uint64_t seed) {
  Rng rng(seed * 1000003ULL + identity * 7919ULL + 17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  IdentityStyle s;
  s.shape = int(identity % 6);
  // Golden-ratio hue walk keeps neighbouring identities far apart in colour.
  const double hue = std::fmod(0.13 + 0.618034 * double(identity) + 0.05 * u(rng), 1.0);
  s.fg = hsv_to_rgb(hue, 0.75 + 0.2 * u(rng), 0.85 + 0.1 * u(rng));
  const double bg_hue = std::fmod(hue + 0.45 + 0.1 * u(rng), 1.0);
  const double dark = identity % 2 ? 0.25 : 0.55;
  s.bg_a = hsv_to_rgb(bg_hue, 0.5, dark);
  s.bg_b = hsv_to_rgb(std::fmod(bg_hue + 0.1, 1.0), 0.4, dark + 0.2);
  s.texture_angle = std::numbers::pi * u(rng);
  s.texture_freq = 0.5 + 1.5 * u(rng);
  return s;
}

// Signed inside-test in the shape's local frame (unit radius).
inline bool inside_shape(int shape, double x, double y) {
  const double r = std::hypot(x, y);
  switch (shape) {
    case 0: return r <= 1.0;                                                                 // disc
    case 1: return std::abs(x) <= 0.85 && std::abs(y) <= 0.85;                               // square
    case 2: return y <= 0.6 && y >= -1.0 + 1.6 * std::abs(x) / 0.95;  // triangle
    case 3: return r <= 1.0 && r >= 0.55;                                                    // ring
    case 4: return (std::abs(x) <= 0.3 && std::abs(y) <= 1.0) || (std::abs(y) <= 0.3 && std::abs(x) <= 1.0);  // cross
    default: return std::abs(x) + std::abs(y) <= 1.0;                                        // diamond
  }
}

}  // namespace detail

/// Deterministic in (spec, seed).
inline Corpus synth_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.kind != "synthetic") throw ConfigError("synth_corpus needs a synthetic corpus spec");
  const std::size_t S = spec.size, N = spec.identities * spec.images_per_identity;
  Corpus c;
  c.size = S;
  c.images = Tensor<float>(Shape{N, 3, S, S});
  constexpr int kSuper = 3;  // supersampling per axis
  for (std::size_t id = 0; id < spec.identities; ++id) {
    const auto style = detail::make_style(id, seed);
    Rng rng(seed * 2654435761ULL + id * 97ULL + 3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t k = 0; k < spec.images_per_identity; ++k) {
      const std::size_t n = id * spec.images_per_identity + k;
      const double cx = 0.5 + 0.12 * u(rng), cy = 0.5 + 0.12 * u(rng);
      const double radius = 0.28 + 0.06 * u(rng);
      const double rot = 0.35 * u(rng);
      const double tshift = 0.5 * u(rng);
      const double cr = std::cos(rot), sr = std::sin(rot);
      const double ta = std::cos(style.texture_angle), tb = std::sin(style.texture_angle);
      for (std::size_t py = 0; py < S; ++py)
        for (std::size_t px = 0; px < S; ++px) {
          std::array<double, 3> acc{};
          for (int sy = 0; sy < kSuper; ++sy)
            for (int sx = 0; sx < kSuper; ++sx) {
              const double fx = (double(px) + (sx + 0.5) / kSuper) / double(S);
              const double fy = (double(py) + (sy + 0.5) / kSuper) / double(S);
              const double dx = (fx - cx) / radius, dy = (fy - cy) / radius;
              const double lx = cr * dx + sr * dy, ly = -sr * dx + cr * dy;
              std::array<double, 3> col;
              if (detail::inside_shape(style.shape, lx, ly)) {
                const double shade = 0.85 + 0.15 * (0.5 - 0.5 * ly);
                for (int ch = 0; ch < 3; ++ch) col[ch] = style.fg[ch] * shade;
              } else {
                const double t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * (style.texture_freq * (ta * fx + tb * fy) + tshift));
                for (int ch = 0; ch < 3; ++ch) col[ch] = style.bg_a[ch] * (1 - t) + style.bg_b[ch] * t;
              }
              for (int ch = 0; ch < 3; ++ch) acc[ch] += col[ch];
            }
          for (std::size_t ch = 0; ch < 3; ++ch) c.images.at(n, ch, py, px) = quantize8(acc[ch] / (kSuper * kSuper));
        }
      CorpusItem item;
      item.identity = id;
      item.id = "id" + std::to_string(id) + "_" + std::to_string(k);
      item.split = k < spec.split[0] ? Split::reference : k < spec.split[0] + spec.split[1] ? Split::protect_target : Split::extra_reference;
      c.items.push_back(item);
    }
  }
  return c;
}

}  // namespace catw
