#pragma once

// SHA-256 content digests and labeled seed fan-out.

#include <openssl/evp.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

#include "catw/nn/checkpoint.hpp"

namespace catw {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  }
  Sha256& update(std::string_view bytes) {
    EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size());
    return *this;
  }
  /// Length-prefixed field, so concatenations stay unambiguous.
  Sha256& field(std::string_view bytes) {
    const std::uint64_t n = bytes.size();
    update(std::string_view(reinterpret_cast<const char*>(&n), sizeof n));
    return update(bytes);
  }
  std::string raw() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md, &len);
    return std::string(reinterpret_cast<const char*>(md), len);
  }
  std::string hex() {
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned char c : raw()) {
      out += digits[c >> 4];
      out += digits[c & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view bytes) { return Sha256().update(bytes).hex(); }

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(detail::read_file(path)); }

/// Per-stage seed: first 8 bytes of sha256(label, seed).
inline std::uint64_t seed_for(std::uint64_t seed, std::string_view label) {
  const std::string d = Sha256().field(label).field(std::to_string(seed)).raw();
  std::uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out = (out << 8) | std::uint8_t(d[std::size_t(i)]);
  return out;
}

}  // namespace catw
