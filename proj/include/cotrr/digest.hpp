#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace cotrr {

/// Lower-case hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

/// Incremental SHA-256 used when hashing several fields without concatenating them.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::string_view data);
  // Length-prefixed field; makes field boundaries unambiguous.
  void update_field(std::string_view data);
  std::string hex_digest();

 private:
  struct Impl;
  Impl* impl_;
};

std::string base64_encode(std::string_view bytes);
// std::nullopt when `text` is not valid padded base64.
std::optional<std::string> base64_decode(std::string_view text);

}  // namespace cotrr
