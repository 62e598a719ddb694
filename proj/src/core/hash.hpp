#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include <json.hpp>

namespace ccm {

/// Incremental SHA-256, hex digest.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const std::uint8_t> bytes);
  void update(std::string_view text);
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view text);

/// Canonical serialization: object keys sorted, no whitespace.
std::string canonical_json(const nlohmann::json& j);

/// Digest of the canonical serialization; stable under key reordering.
std::string json_hash(const nlohmann::json& j);

}  // namespace ccm
