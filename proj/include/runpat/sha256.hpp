#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace runpat {

// FIPS 180-4 SHA-256, used for the run-directory input manifests.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, std::size_t len);
  void update(std::string_view s) { update(s.data(), s.size()); }
  // hex digest; object must not be reused afterwards
  std::string hex_digest();

 private:
  void process_block(const std::uint8_t* block);
  std::uint32_t h_[8];
  std::uint8_t buf_[64];
  std::size_t buf_len_ = 0;
  std::uint64_t total_bits_ = 0;
};

std::string sha256_hex(std::string_view data);
std::string sha256_file_hex(const std::string& path);

}  // namespace runpat
