// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "glab/core/crc64.hpp"
#include "glab/core/error.hpp"

namespace glab::io {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

// Append-only little-endian byte buffer.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(uint8_t v) { bytes(&v, 1); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void f64s(std::span<const double> v) { bytes(v.data(), v.size() * 8); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& buffer() const { return buf_; }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

// Bounds-checked reader over a byte buffer; overruns raise `Err`.
template <class Err = CheckpointError>
class Reader {
 public:
  explicit Reader(std::string_view data) : d_(data) {}

  void bytes(void* out, std::size_t n) {
    if (n > d_.size() - pos_) throw Err("truncated input at byte " + std::to_string(pos_));
    std::memcpy(out, d_.data() + pos_, n);
    pos_ += n;
  }
  uint8_t u8() { uint8_t v; bytes(&v, 1); return v; }
  uint32_t u32() { uint32_t v; bytes(&v, 4); return v; }
  uint64_t u64() { uint64_t v; bytes(&v, 8); return v; }
  double f64() { double v; bytes(&v, 8); return v; }
  std::vector<double> f64s(std::size_t n) {
    if (n > (d_.size() - pos_) / 8) throw Err("truncated input at byte " + std::to_string(pos_));
    std::vector<double> v(n);
    bytes(v.data(), n * 8);
    return v;
  }
  std::string str() {
    const uint32_t n = u32();
    if (n > d_.size() - pos_) throw Err("truncated string at byte " + std::to_string(pos_));
    std::string s(d_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return d_.size() - pos_; }

 private:
  std::string_view d_;
  std::size_t pos_ = 0;
};

// Writes to a sibling temporary and renames over `path`.
inline void atomic_write(const std::filesystem::path& path, const std::string& data) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + tmp + " for writing");
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw CheckpointError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("rename " + tmp + " -> " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Appends the CRC-64 of everything written so far.
inline void seal(Writer& w) { w.u64(Crc64::of(w.buffer())); }

// Verifies and strips the trailing CRC-64.
template <class Err = CheckpointError>
std::string_view unseal(std::string_view data, const std::string& what) {
  if (data.size() < 8) throw Err(what + ": file too short for checksum");
  const std::string_view body = data.substr(0, data.size() - 8);
  uint64_t stored;
  std::memcpy(&stored, data.data() + body.size(), 8);
  if (Crc64::of(body) != stored) throw Err(what + ": checksum mismatch");
  return body;
}

}  // namespace glab::io
