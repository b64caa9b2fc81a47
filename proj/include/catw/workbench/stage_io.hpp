#pragma once

// File access mediation for pipeline stages.

#include <algorithm>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "catw/workbench/hashing.hpp"

namespace catw {

namespace fs = std::filesystem;

/// A stage tried to read outside its allow-list.
class AccessViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArtifactRef {
  std::string path;  // relative to the run directory when inside it
  std::string sha256;
  bool operator==(const ArtifactRef&) const = default;
};

inline void to_json(nlohmann::json& j, const ArtifactRef& a) { j = {{"path", a.path}, {"sha256", a.sha256}}; }
inline void from_json(const nlohmann::json& j, ArtifactRef& a) {
  a.path = j.at("path");
  a.sha256 = j.at("sha256");
}

/// Every stage read goes through here. Reads are recorded with their digest;
/// when an allow-list is set, paths outside it raise AccessViolation.
class StageIO {
 public:
  StageIO(const fs::path& run_dir, std::optional<std::vector<std::string>> allowed = std::nullopt)
      : run_dir_(fs::absolute(run_dir).lexically_normal()), allowed_(std::move(allowed)) {}

  const fs::path& run_dir() const { return run_dir_; }
  const std::optional<std::vector<std::string>>& allowed() const { return allowed_; }

  std::string relative(const fs::path& p) const {
    const fs::path abs = fs::absolute(p).lexically_normal();
    const fs::path rel = abs.lexically_relative(run_dir_);
    if (rel.empty() || *rel.begin() == "..") return abs.generic_string();
    return rel.generic_string();
  }

  bool permitted(const fs::path& p) const {
    if (!allowed_) return true;
    const std::string rel = relative(p);
    return std::any_of(allowed_->begin(), allowed_->end(),
                       [&](const std::string& pre) { return rel.rfind(pre, 0) == 0; });
  }

  /// Reads a whole file.
  std::string read(const fs::path& p) {
    check(p);
    std::string bytes = detail::read_file(p);
    record(p, sha256_hex(bytes));
    return bytes;
  }

  /// Checks and records a file that the caller will load itself.
  fs::path open(const fs::path& p) {
    check(p);
    record(p, sha256_file(p));
    return p;
  }

  /// Allows a path to be listed (e.g. existence tests) without reading it.
  bool exists(const fs::path& p) const { return permitted(p) && fs::exists(p); }

  const std::vector<ArtifactRef>& inputs() const { return inputs_; }

  auto reader() {
    return [this](const fs::path& p) { return read(p); };
  }

 private:
  void check(const fs::path& p) const {
    if (!permitted(p)) throw AccessViolation("stage is not permitted to read " + relative(p));
  }
  void record(const fs::path& p, std::string digest) {
    const std::string rel = relative(p);
    if (seen_.insert(rel).second) inputs_.push_back({rel, std::move(digest)});
  }

  fs::path run_dir_;
  std::optional<std::vector<std::string>> allowed_;
  std::set<std::string> seen_;
  std::vector<ArtifactRef> inputs_;
};

}  // namespace catw
