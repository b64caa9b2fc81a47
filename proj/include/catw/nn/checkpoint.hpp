#pragma once

// Checkpoint container:
//   "CATW0001" | u64 LE header length | UTF-8 JSON header | zero pad to 64 |
//   tensor buffers (little-endian, each starting on a 64-byte boundary
//   relative to the start of the file, in header order).

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

#include "catw/nn/graph.hpp"

namespace catw {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr char kCheckpointMagic[] = "CATW0001";
inline constexpr std::size_t kCheckpointAlign = 64;

enum class CheckpointSections { all, base_only, adapters_only };

template <class T>
struct Checkpoint {
  ModelGraph<T> graph;
  nlohmann::json meta;
};

namespace detail {

inline std::size_t align_up(std::size_t n) { return (n + kCheckpointAlign - 1) / kCheckpointAlign * kCheckpointAlign; }

template <class T>
nlohmann::json tensor_entry(const std::string& name, const Tensor<T>& t, const char* section) {
  return {{"name", name}, {"shape", t.shape()}, {"dtype", dtype_name<T>()}, {"section", section}};
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), std::streamsize(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace detail

template <class T>
void save_checkpoint(const ModelGraph<T>& g, const std::filesystem::path& path, const nlohmann::json& meta = nlohmann::json::object(),
                     CheckpointSections sections = CheckpointSections::all) {
  nlohmann::json header;
  header["version"] = 1;
  header["meta"] = meta;
  header["merged"] = g.merged();
  std::vector<const Tensor<T>*> buffers;
  nlohmann::json entries = nlohmann::json::array();

  if (sections != CheckpointSections::adapters_only) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : g.layers())
      layers.push_back({{"name", l.name}, {"kind", l.kind == LayerKind::conv ? "conv" : "attention"}, {"hosts", l.hosts}});
    header["layers"] = layers;
    for (const auto& p : g.params()) {
      auto e = detail::tensor_entry(p.name, p.value(), "base");
      e["trainable"] = p.trainable;
      entries.push_back(e);
      buffers.push_back(&p.value());
    }
  }
  if (sections != CheckpointSections::base_only) {
    for (const auto& [host, a] : g.adapters()) {
      for (const auto* part : {&a.down, &a.up}) {
        auto e = detail::tensor_entry(part->name, part->value(), "adapter");
        e["host"] = host;
        e["rank"] = a.rank;
        e["role"] = part == &a.down ? "down" : "up";
        entries.push_back(e);
        buffers.push_back(&part->value());
      }
    }
  }

  // Offsets depend on the header length, which depends on the offsets'
  // digits; iterate until stable.
  std::string text;
  std::size_t data_start = 0;
  for (int pass = 0; pass < 4; ++pass) {
    std::size_t offset = data_start;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      entries[i]["offset"] = offset;
      entries[i]["nbytes"] = buffers[i]->numel() * sizeof(T);
      offset = detail::align_up(offset + buffers[i]->numel() * sizeof(T));
    }
    header["tensors"] = entries;
    text = header.dump();
    std::size_t next = detail::align_up(8 + 8 + text.size());
    if (next == data_start) break;
    data_start = next;
  }

  std::string out(kCheckpointMagic, 8);
  const std::uint64_t hlen = text.size();
  out.append(reinterpret_cast<const char*>(&hlen), 8);
  out += text;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out.resize(entries[i]["offset"].get<std::size_t>(), '\0');
    out.append(reinterpret_cast<const char*>(buffers[i]->data()), buffers[i]->numel() * sizeof(T));
  }
  out.resize(detail::align_up(out.size()), '\0');
  detail::write_file_atomic(path, out);
}

namespace detail {

struct ParsedCheckpoint {
  nlohmann::json header;
  std::string bytes;
};

inline ParsedCheckpoint parse_checkpoint(const std::filesystem::path& path) {
  ParsedCheckpoint p;
  p.bytes = read_file(path);
  if (p.bytes.size() < 16 || p.bytes.compare(0, 8, kCheckpointMagic, 8) != 0)
    throw LoadError("bad checkpoint magic in " + path.string() + " (expected CATW0001)");
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, p.bytes.data() + 8, 8);
  if (16 + hlen > p.bytes.size()) throw LoadError("truncated checkpoint header in " + path.string());
  try {
    p.header = nlohmann::json::parse(p.bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  if (p.header.value("version", 0) != 1) throw LoadError("unsupported checkpoint version in " + path.string());
  return p;
}

template <class T>
Tensor<T> read_tensor(const ParsedCheckpoint& p, const nlohmann::json& e) {
  Shape shape = e.at("shape").get<Shape>();
  const std::string dtype = e.at("dtype");
  const std::size_t offset = e.at("offset"), nbytes = e.at("nbytes");
  if (offset + nbytes > p.bytes.size()) throw LoadError("tensor " + e.at("name").get<std::string>() + " out of file bounds");
  const std::size_t n = shape_numel(shape);
  if (dtype == "f32") {
    if (nbytes != n * 4) throw LoadError("tensor size mismatch for " + e.at("name").get<std::string>());
    std::vector<float> v(n);
    std::memcpy(v.data(), p.bytes.data() + offset, nbytes);
    return Tensor<float>(shape, std::move(v)).template cast<T>();
  }
  if (dtype == "f64") {
    if (nbytes != n * 8) throw LoadError("tensor size mismatch for " + e.at("name").get<std::string>());
    std::vector<double> v(n);
    std::memcpy(v.data(), p.bytes.data() + offset, nbytes);
    return Tensor<double>(shape, std::move(v)).template cast<T>();
  }
  throw LoadError("unknown dtype " + dtype);
}

template <class T>
std::vector<LowRankAdapter<T>> read_adapters(const ParsedCheckpoint& p) {
  std::map<std::string, LowRankAdapter<T>> by_host;
  for (const auto& e : p.header.at("tensors")) {
    if (e.at("section") != "adapter") continue;
    const std::string host = e.at("host");
    auto& a = by_host[host];
    a.host = host;
    a.rank = e.at("rank");
    Param<T> part{e.at("name"), leaf(read_tensor<T>(p, e), true), true};
    (e.at("role") == "down" ? a.down : a.up) = std::move(part);
  }
  std::vector<LowRankAdapter<T>> out;
  for (auto& [h, a] : by_host) {
    if (!a.down.node || !a.up.node) throw LoadError("adapter for host " + h + " is missing a factor");
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace detail

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  auto p = detail::parse_checkpoint(path);
  Checkpoint<T> ck;
  ck.meta = p.header.value("meta", nlohmann::json::object());
  for (const auto& e : p.header.at("tensors")) {
    if (e.at("section") != "base") continue;
    ck.graph.add_param(e.at("name"), detail::read_tensor<T>(p, e), e.value("trainable", true));
  }
  if (p.header.contains("layers"))
    for (const auto& l : p.header.at("layers"))
      ck.graph.add_layer({l.at("name"), l.at("kind") == "conv" ? LayerKind::conv : LayerKind::attention,
                          l.at("hosts").get<std::vector<std::string>>()});
  for (auto& a : detail::read_adapters<T>(p)) ck.graph.attach_adapter(std::move(a));
  return ck;
}

/// Attaches every adapter stored in `path` onto `g`. Shape disagreement with
/// a host is a LoadError naming that host.
template <class T>
void load_adapters_into(ModelGraph<T>& g, const std::filesystem::path& path) {
  auto p = detail::parse_checkpoint(path);
  for (auto& a : detail::read_adapters<T>(p)) g.attach_adapter(std::move(a));
}

}  // namespace catw
