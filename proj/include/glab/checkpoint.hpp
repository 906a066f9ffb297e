// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glab/core/binary_io.hpp"
#include "glab/core/parameter_store.hpp"
#include "glab/optim.hpp"

namespace glab {

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr uint8_t kDtypeF64 = 1;

struct TensorRecord {
  std::string name;
  std::string group;
  bool frozen = false;
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<TensorRecord> tensors;
  uint64_t optimizer_step = 0;
  std::map<std::string, AdamW::Moments> moments;
  std::map<std::string, std::string> rng_states;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline Checkpoint capture_checkpoint(const ParameterStore& store, const AdamW* opt = nullptr,
                                     nlohmann::json metadata = nlohmann::json::object()) {
  Checkpoint c;
  c.metadata = std::move(metadata);
  for (const auto& e : store.entries()) {
    c.tensors.push_back({e.name, e.group, e.frozen, e.tensor.shape(),
                         std::vector<double>(e.tensor.data().begin(), e.tensor.data().end())});
  }
  if (opt) {
    c.optimizer_step = opt->steps();
    c.moments = opt->moments();
  }
  return c;
}

// Copies every stored tensor into `store` by name. Unknown names and shape
// mismatches are rejected; frozen flags are restored from the file.
inline void restore_checkpoint(const Checkpoint& c, ParameterStore& store, AdamW* opt = nullptr,
                               bool allow_missing = false) {
  for (const auto& t : c.tensors) {
    if (!store.contains(t.name)) {
      if (allow_missing) continue;
      throw CheckpointError("checkpoint tensor '" + t.name + "' has no counterpart in the model");
    }
    auto& e = store.entry(t.name);
    if (e.tensor.shape() != t.shape) {
      throw CheckpointError("shape mismatch for '" + t.name + "': file " + shape_str(t.shape) + ", model " +
                            shape_str(e.tensor.shape()));
    }
    store.assign(t.name, t.data);
    store.set_frozen(t.name, t.frozen);
  }
  if (opt) {
    opt->set_steps(c.optimizer_step);
    opt->moments() = c.moments;
  }
}

inline std::string encode_checkpoint(const Checkpoint& c) {
  io::Writer w;
  w.bytes("GLAB", 4);
  w.u32(kCheckpointVersion);
  w.str(c.metadata.dump());
  w.u32(static_cast<uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.str(t.name);
    w.str(t.group);
    w.u8(t.frozen ? 1 : 0);
    w.u8(kDtypeF64);
    w.u8(static_cast<uint8_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.u64(d);
  }
  for (const auto& t : c.tensors) w.f64s(t.data);
  w.u64(c.optimizer_step);
  w.u32(static_cast<uint32_t>(c.moments.size()));
  for (const auto& [name, m] : c.moments) {
    w.str(name);
    w.u64(m.m.size());
    w.f64s(m.m);
    w.f64s(m.v);
  }
  w.u32(static_cast<uint32_t>(c.rng_states.size()));
  for (const auto& [k, v] : c.rng_states) {
    w.str(k);
    w.str(v);
  }
  io::seal(w);
  return std::move(w.buffer());
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 || bytes.substr(0, 4) != "GLAB") throw CheckpointError("checkpoint: bad magic");
  const std::string_view body = io::unseal(bytes, "checkpoint");
  io::Reader r(body);
  char magic[4];
  r.bytes(magic, 4);
  if (const uint32_t v = r.u32(); v != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(v) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  try {
    c.metadata = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  const uint32_t n = r.u32();
  c.tensors.resize(n);
  for (auto& t : c.tensors) {
    t.name = r.str();
    t.group = r.str();
    t.frozen = r.u8() != 0;
    if (const uint8_t dt = r.u8(); dt != kDtypeF64) {
      throw CheckpointError("checkpoint: unsupported dtype code " + std::to_string(dt) + " for '" + t.name + "'");
    }
    const uint8_t rank = r.u8();
    if (rank > 2) throw CheckpointError("checkpoint: rank " + std::to_string(rank) + " for '" + t.name + "'");
    for (uint8_t i = 0; i < rank; ++i) t.shape.push_back(r.u64());
  }
  for (auto& t : c.tensors) t.data = r.f64s(shape_numel(t.shape));
  c.optimizer_step = r.u64();
  const uint32_t nm = r.u32();
  for (uint32_t i = 0; i < nm; ++i) {
    std::string name = r.str();
    const uint64_t len = r.u64();
    AdamW::Moments m;
    m.m = r.f64s(len);
    m.v = r.f64s(len);
    c.moments.emplace(std::move(name), std::move(m));
  }
  const uint32_t nr = r.u32();
  for (uint32_t i = 0; i < nr; ++i) {
    std::string k = r.str();
    c.rng_states[k] = r.str();
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  io::atomic_write(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace glab
