// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace glab {

// CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones).
class Crc64 {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) crc_ = table()[(crc_ ^ p[i]) & 0xFF] ^ (crc_ >> 8);
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  uint64_t value() const { return crc_ ^ ~uint64_t{0}; }

  static uint64_t of(std::string_view s) {
    Crc64 c;
    c.update(s);
    return c.value();
  }

 private:
  static const std::array<uint64_t, 256>& table() {
    static const std::array<uint64_t, 256> t = [] {
      std::array<uint64_t, 256> out{};
      constexpr uint64_t kPoly = 0xC96C5795D7870F42ULL;
      for (uint64_t i = 0; i < 256; ++i) {
        uint64_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? (c >> 1) ^ kPoly : c >> 1;
        out[i] = c;
      }
      return out;
    }();
    return t;
  }

  uint64_t crc_ = ~uint64_t{0};
};

}  // namespace glab
