// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "glab/core/linalg.hpp"
#include "glab/core/ops.hpp"
#include "glab/core/parameter_store.hpp"
#include "glab/nn.hpp"

namespace glab {

// Slice embeddings of one volume with physical z positions in millimetres.
struct SliceSequence {
  Tensor embeddings;  // N × d_v
  std::vector<double> z_mm;
  std::vector<bool> valid;

  std::size_t size() const { return z_mm.size(); }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (bool v : valid) n += v;
    return n;
  }
};

// Half-open slice-index range [begin, end).
using ZoneBounds = std::vector<std::pair<std::size_t, std::size_t>>;

struct EncoderConfig {
  std::size_t d_v = 64;
  std::size_t tokens = 8;  // K
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t max_slices = 600;
  double pe_base = 10000.0;
};

// Sinusoidal encoding of a physical z coordinate:
// [2i] = sin(z / base^(2i/d)), [2i+1] = cos(z / base^(2i/d)).
inline std::vector<double> z_positional_encoding(double z_mm, std::size_t d, double base = 10000.0) {
  std::vector<double> pe(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double expo = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
    const double ang = z_mm / std::pow(base, expo);
    pe[i] = (i % 2 == 0) ? std::sin(ang) : std::cos(ang);
  }
  return pe;
}

inline void validate_z(const SliceSequence& seq) {
  if (seq.valid.size() != seq.z_mm.size() || seq.embeddings.rows() != seq.z_mm.size()) {
    throw ShapeError("SliceSequence: embeddings, z_mm and valid lengths differ");
  }
  bool have_prev = false;
  double prev = 0.0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!seq.valid[i]) continue;
    if (!std::isfinite(seq.z_mm[i])) throw ContractError("z coordinate is not finite at slice " + std::to_string(i));
    if (have_prev && !(seq.z_mm[i] > prev)) {
      throw ContractError("z coordinates must be strictly increasing over valid slices (slice " +
                          std::to_string(i) + ")");
    }
    prev = seq.z_mm[i];
    have_prev = true;
  }
}

// s_i' = s_i + PE(z_i) on valid slices; invalid slices are copied unchanged.
inline SliceSequence apply_z_positional_encoding(const SliceSequence& seq, double base = 10000.0) {
  validate_z(seq);
  const std::size_t d = seq.embeddings.cols();
  std::vector<double> out(seq.embeddings.data().begin(), seq.embeddings.data().end());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!seq.valid[i]) continue;
    const auto pe = z_positional_encoding(seq.z_mm[i], d, base);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += pe[j];
  }
  SliceSequence res = seq;
  res.embeddings = Tensor::from(seq.embeddings.shape(), std::move(out));
  return res;
}

// Zone k (0-based) covers [floor(k·N/K), floor((k+1)·N/K)).
inline ZoneBounds partition_zones(std::size_t n, std::size_t k) {
  ZoneBounds z;
  z.reserve(k);
  for (std::size_t i = 0; i < k; ++i) z.emplace_back(i * n / k, (i + 1) * n / k);
  return z;
}

// Compresses a slice sequence into exactly K tokens: zone-constrained
// cross-attention from K learned queries followed by one post-norm
// transformer encoder layer across the tokens.
class VisualEncoder {
 public:
  VisualEncoder(EncoderConfig cfg, ParameterStore& store, Rng& rng) : cfg_(cfg) {
    const std::size_t d = cfg_.d_v;
    if (cfg_.tokens == 0) throw ContractError("encoder: K must be >= 1");
    if (d % cfg_.heads != 0) throw ContractError("encoder: heads must divide d_v");
    auto reg = [&](const std::string& n, Tensor t) { return store.add("encoder." + n, std::move(t), "encoder"); };
    const double ws = 1.0 / std::sqrt(static_cast<double>(d));
    queries_ = reg("queries", nn::normal_init({cfg_.tokens, d}, 1.0, rng));
    xq_ = reg("zone_attn.q_proj.weight", nn::xavier_uniform(d, d, 1.0, rng));
    xqb_ = reg("zone_attn.q_proj.bias", nn::zeros({d}));
    xk_ = reg("zone_attn.k_proj.weight", nn::xavier_uniform(d, d, 1.0, rng));
    xkb_ = reg("zone_attn.k_proj.bias", nn::zeros({d}));
    xv_ = reg("zone_attn.v_proj.weight", nn::xavier_uniform(d, d, 1.0, rng));
    xvb_ = reg("zone_attn.v_proj.bias", nn::zeros({d}));
    xo_ = reg("zone_attn.o_proj.weight", nn::xavier_uniform(d, d, 1.0, rng));
    xob_ = reg("zone_attn.o_proj.bias", nn::zeros({d}));
    sq_ = reg("global.q_proj.weight", nn::xavier_uniform(d, d, 1.0, rng));
    sqb_ = reg("global.q_proj.bias", nn::zeros({d}));
    sk_ = reg("global.k_proj.weight", nn::xavier_uniform(d, d, 1.0, rng));
    skb_ = reg("global.k_proj.bias", nn::zeros({d}));
    sv_ = reg("global.v_proj.weight", nn::xavier_uniform(d, d, 1.0, rng));
    svb_ = reg("global.v_proj.bias", nn::zeros({d}));
    so_ = reg("global.o_proj.weight", nn::xavier_uniform(d, d, 1.0, rng));
    sob_ = reg("global.o_proj.bias", nn::zeros({d}));
    ln1g_ = reg("global.norm1.weight", nn::ones({d}));
    ln1b_ = reg("global.norm1.bias", nn::zeros({d}));
    f1_ = reg("global.ffn1.weight", nn::normal_init({cfg_.ffn, d}, ws, rng));
    f1b_ = reg("global.ffn1.bias", nn::zeros({cfg_.ffn}));
    f2_ = reg("global.ffn2.weight", nn::normal_init({d, cfg_.ffn}, 1.0 / std::sqrt(static_cast<double>(cfg_.ffn)), rng));
    f2b_ = reg("global.ffn2.bias", nn::zeros({d}));
    ln2g_ = reg("global.norm2.weight", nn::ones({d}));
    ln2b_ = reg("global.norm2.bias", nn::zeros({d}));
  }

  const EncoderConfig& config() const { return cfg_; }
  const Tensor& queries() const { return queries_; }

  // Token k attends only to valid slices of zone k. Zones are computed over
  // the valid slices in order. An empty zone contributes its query in place
  // of the (zero) attention readout before the output projection.
  Tensor zone_cross_attention(const SliceSequence& seq, ZoneBounds* bounds_out = nullptr) const {
    const SliceSequence pe = apply_z_positional_encoding(seq, cfg_.pe_base);
    return zone_cross_attention_encoded(valid_rows(pe), bounds_out);
  }

  // Same as zone_cross_attention, on already-encoded valid slices (N × d_v).
  Tensor zone_cross_attention_encoded(const Tensor& slices, ZoneBounds* bounds_out = nullptr) const {
    const std::size_t n = slices.rows(), k = cfg_.tokens;
    if (n == 0) throw ContractError("zone_cross_attention: no valid slices");
    if (n > cfg_.max_slices) {
      throw ContractError("zone_cross_attention: " + std::to_string(n) + " slices exceed max " +
                          std::to_string(cfg_.max_slices));
    }
    const ZoneBounds zones = partition_zones(n, k);
    std::vector<uint8_t> allowed(k * n, 0);
    std::vector<bool> empty(k, false);
    for (std::size_t z = 0; z < k; ++z) {
      for (std::size_t i = zones[z].first; i < zones[z].second; ++i) allowed[z * n + i] = 1;
      empty[z] = zones[z].first == zones[z].second;
    }
    const Tensor q = nn::linear(queries_, xq_, xqb_);
    const Tensor kp = nn::linear(slices, xk_, xkb_);
    const Tensor vp = nn::linear(slices, xv_, xvb_);
    Tensor readout = multi_head_attention(q, kp, vp, cfg_.heads, AttnMask::explicit_mask(std::move(allowed)));
    if (std::find(empty.begin(), empty.end(), true) != empty.end()) {
      readout = add(readout, mul(queries_, nn::row_selector(empty)));
    }
    if (bounds_out) *bounds_out = zones;
    return nn::linear(readout, xo_, xob_);
  }

  // One post-norm transformer encoder layer over the K tokens.
  Tensor global_self_attention(const Tensor& tokens) const {
    const Tensor q = nn::linear(tokens, sq_, sqb_);
    const Tensor k = nn::linear(tokens, sk_, skb_);
    const Tensor v = nn::linear(tokens, sv_, svb_);
    const Tensor sa = nn::linear(multi_head_attention(q, k, v, cfg_.heads), so_, sob_);
    const Tensor x1 = layer_norm(add(tokens, sa), ln1g_, ln1b_);
    const Tensor ff = nn::linear(gelu(nn::linear(x1, f1_, f1b_)), f2_, f2b_);
    return layer_norm(add(x1, ff), ln2g_, ln2b_);
  }

  Tensor forward(const SliceSequence& seq, ZoneBounds* bounds_out = nullptr) const {
    return global_self_attention(zone_cross_attention(seq, bounds_out));
  }

  // Replaces the query bank with the top-K right singular vectors of a slice
  // sample, each scaled to the mean slice norm.
  void init_queries_svd(const Tensor& sample);

  static Tensor valid_rows(const SliceSequence& seq) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < seq.size(); ++i)
      if (seq.valid[i]) idx.push_back(i);
    NoGradGuard ng;
    return gather_rows(seq.embeddings, idx);
  }

 private:
  EncoderConfig cfg_;
  Tensor queries_;
  Tensor xq_, xqb_, xk_, xkb_, xv_, xvb_, xo_, xob_;
  Tensor sq_, sqb_, sk_, skb_, sv_, svb_, so_, sob_;
  Tensor ln1g_, ln1b_, f1_, f1b_, f2_, f2b_, ln2g_, ln2b_;
};

// Query bank from the top-K right singular vectors of `sample` (M × d_v),
// each row scaled to the mean row norm of the sample. Rank-deficient samples
// are rejected.
inline Tensor svd_query_bank(const Tensor& sample, std::size_t k) {
  if (sample.rows() < k) {
    throw ContractError("init_queries_svd: need at least K=" + std::to_string(k) + " sample rows, got " +
                        std::to_string(sample.rows()));
  }
  const ThinSvd svd = svd_thin(sample, k);
  const double smax = svd.s[0];
  if (!(svd.s[k - 1] > 1e-10 * smax)) {
    throw ContractError("init_queries_svd: sample rank is below K=" + std::to_string(k));
  }
  const double target = nn::mean_row_norm(sample);
  std::vector<double> q(svd.vt.data().begin(), svd.vt.data().end());
  for (auto& v : q) v *= target;
  return Tensor::from({k, sample.cols()}, std::move(q));
}

inline void VisualEncoder::init_queries_svd(const Tensor& sample) {
  const Tensor bank = svd_query_bank(sample, cfg_.tokens);
  std::copy(bank.data().begin(), bank.data().end(), queries_.mutable_data().begin());
}

}  // namespace glab
