#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

#include "refprior/matrix.hpp"

namespace refprior {

/// 64-bit FNV-1a. Used for checkpoint content hashes, bank checksums and
/// config fingerprints; none of these are security sensitive.
class Fnv1a64 {
 public:
  void update(std::span<const std::uint8_t> bytes) noexcept {
    for (std::uint8_t b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) noexcept {
    update({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  void update_u64(std::uint64_t v) noexcept {
    std::uint8_t buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<std::uint8_t>(v >> (8 * i));
    update(buf);
  }
  void update_f32(float v) noexcept {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    std::uint8_t buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<std::uint8_t>(bits >> (8 * i));
    update(buf);
  }
  void update(const num::Tensor2& m) noexcept {
    update_u64(m.rows());
    update_u64(m.cols());
    for (float v : m.flat()) update_f32(v);
  }

  std::uint64_t digest() const noexcept { return state_; }
  std::string hex() const { return to_hex(state_); }

  static std::string to_hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a64_hex(std::string_view s) {
  Fnv1a64 h;
  h.update(s);
  return h.hex();
}

}  // namespace refprior
