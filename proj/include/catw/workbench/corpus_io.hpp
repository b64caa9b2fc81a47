#pragma once

// Corpus directories: images/<id>.png plus index.json, and an optional
// sidecar.json for protected or purified sets. Folder ingestion with
// center-crop and bilinear resize.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "catw/workbench/corpus.hpp"
#include "catw/workbench/image_io.hpp"

namespace catw {

namespace fs = std::filesystem;

/// Square center crop of side min(w, h).
inline Image8 center_crop(const Image8& img) {
  const std::size_t side = std::min(img.width, img.height);
  const std::size_t x0 = (img.width - side) / 2, y0 = (img.height - side) / 2;
  Image8 out{side, side, std::vector<std::uint8_t>(side * side * 3)};
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
  return out;
}

/// Bilinear resize with pixel-centre alignment and edge clamping. Returns
/// values in [0, 1] as a 3×S×S planar buffer.
inline std::vector<float> resize_bilinear(const Image8& img, std::size_t S) {
  std::vector<float> out(3 * S * S);
  const double sx = double(img.width) / double(S), sy = double(img.height) / double(S);
  for (std::size_t y = 0; y < S; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(img.height - 1));
    const std::size_t y0 = std::size_t(fy), y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < S; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(img.width - 1));
      const std::size_t x0 = std::size_t(fx), x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - double(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = img.at(x0, y0, c) * (1 - wx) + img.at(x1, y0, c) * wx;
        const double bot = img.at(x0, y1, c) * (1 - wx) + img.at(x1, y1, c) * wx;
        out[(c * S + y) * S + x] = float((top * (1 - wy) + bot * wy) / 255.0);
      }
    }
  }
  return out;
}

struct IngestResult {
  Corpus corpus;
  std::vector<fs::path> files;       // ingested, in corpus order
  std::vector<std::string> skipped;  // unreadable or undecodable files
};

/// Each subdirectory of `root` is one identity (sorted by name); loose image
/// files directly under `root` form a single identity. Within an identity,
/// files are sorted and assigned to reference, protect_target and
/// extra_reference by the split sizes; surplus files go to extra_reference.
inline IngestResult ingest_folder(const fs::path& root, std::size_t S, const std::array<std::size_t, 3>& split = {4, 4, 4}) {
  if (!fs::is_directory(root)) throw ConfigError("ingest path " + root.string() + " is not a directory");
  auto is_image = [](const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    return ext == ".png" || ext == ".ppm";
  };
  auto list = [&](const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && is_image(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    return files;
  };
  std::vector<std::pair<std::string, std::vector<fs::path>>> groups;
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs)
    if (auto f = list(d); !f.empty()) groups.emplace_back(d.filename().string(), f);
  if (auto loose = list(root); !loose.empty()) groups.emplace_back("root", loose);

  IngestResult res;
  res.corpus.size = S;
  std::vector<float> pixels;
  std::size_t identity = 0;
  for (const auto& [name, files] : groups) {
    std::size_t k = 0;
    for (const auto& f : files) {
      Image8 img;
      try {
        img = read_image(f);
      } catch (const std::exception&) {
        res.skipped.push_back(f.string());
        continue;
      }
      res.files.push_back(f);
      auto px = resize_bilinear(center_crop(img), S);
      pixels.insert(pixels.end(), px.begin(), px.end());
      CorpusItem item;
      item.identity = identity;
      item.id = name + "_" + f.stem().string();
      item.split = k < split[0] ? Split::reference : k < split[0] + split[1] ? Split::protect_target : Split::extra_reference;
      res.corpus.items.push_back(item);
      ++k;
    }
    if (k > 0) ++identity;
  }
  if (res.corpus.items.empty()) throw ConfigError("no decodable images under " + root.string());
  if (!res.skipped.empty()) std::cerr << "warning: skipped " << res.skipped.size() << " unreadable image file(s)\n";
  res.corpus.images = Tensor<float>(Shape{res.corpus.items.size(), 3, S, S}, pixels);
  return res;
}

/// Subset of a corpus, keeping item metadata.
inline Corpus subset(const Corpus& c, const std::vector<std::size_t>& idx) {
  Corpus out;
  out.size = c.size;
  for (auto i : idx) out.items.push_back(c.items[i]);
  out.images = c.gather(idx);
  return out;
}

/// Rounds every pixel to the nearest 8-bit level.
inline Tensor<float> quantize_images(Tensor<float> x) {
  for (auto& v : x.vec()) v = quantize8(v);
  return x;
}

/// Writes images/<id>.png and index.json, plus sidecar.json when given.
/// Returns the written files.
inline std::vector<fs::path> write_corpus(const fs::path& dir, const Corpus& c,
                                          const nlohmann::json& sidecar = nullptr) {
  std::vector<fs::path> out;
  fs::create_directories(dir / "images");
  nlohmann::json idx = c.index_json();
  for (std::size_t n = 0; n < c.items.size(); ++n) {
    const fs::path rel = fs::path("images") / (c.items[n].id + ".png");
    write_png(dir / rel, to_image8(c.images, n));
    idx["items"][n]["file"] = rel.generic_string();
    out.push_back(dir / rel);
  }
  detail::write_file_atomic(dir / "index.json", idx.dump(1) + "\n");
  out.push_back(dir / "index.json");
  if (!sidecar.is_null()) {
    detail::write_file_atomic(dir / "sidecar.json", sidecar.dump(1) + "\n");
    out.push_back(dir / "sidecar.json");
  }
  return out;
}

/// `reader` performs every file read, so callers can audit or restrict it.
template <class Reader>
Corpus read_corpus(const fs::path& dir, Reader&& reader) {
  const auto idx = nlohmann::json::parse(reader(dir / "index.json"));
  Corpus c;
  c.size = idx.at("size");
  const auto& items = idx.at("items");
  if (items.empty()) throw LoadError("corpus index " + (dir / "index.json").string() + " lists no images");
  c.images = Tensor<float>(Shape{items.size(), 3, c.size, c.size});
  for (std::size_t n = 0; n < items.size(); ++n) {
    CorpusItem it;
    it.id = items[n].at("id");
    it.identity = items[n].at("identity");
    it.split = parse_split(items[n].at("split"));
    c.items.push_back(it);
    const std::string file = items[n].at("file");
    const std::string bytes = reader(dir / file);
    from_image8(bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6' ? decode_ppm(bytes) : decode_png(bytes), c.images, n);
  }
  return c;
}

inline Corpus read_corpus(const fs::path& dir) {
  return read_corpus(dir, [](const fs::path& p) { return detail::read_file(p); });
}

}  // namespace catw
