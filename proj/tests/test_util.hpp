// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "glab/glab.hpp"

namespace glab::testing {

inline Tensor randn(Shape shape, Rng& rng, double sd = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(std::move(shape), std::move(v));
}

inline LabelVector labels_of(std::initializer_list<int> bits) {
  LabelVector y;
  for (int b : bits) y.values.push_back(b != 0);
  return y;
}

inline LabelVector random_labels(std::size_t c, Rng& rng, double p = 0.5) {
  LabelVector y;
  for (std::size_t i = 0; i < c; ++i) y.values.push_back(rng.uniform() < p);
  return y;
}

// Registers a fresh trainable leaf in `store` and returns a handle to it.
inline Tensor& param(ParameterStore& store, const std::string& name, Tensor t) {
  return store.add(name, std::move(t), "heads");
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline SliceSequence make_sequence(std::size_t n, std::size_t d, Rng& rng, double spacing = 1.5) {
  SliceSequence s;
  s.embeddings = randn({n, d}, rng);
  for (std::size_t i = 0; i < n; ++i) s.z_mm.push_back(spacing * static_cast<double>(i) - 20.0);
  s.valid.assign(n, true);
  return s;
}

inline DecoderConfig tiny_decoder(std::size_t vocab = 40) {
  DecoderConfig c;
  c.layers = 3;
  c.d_model = 8;
  c.heads = 2;
  c.ffn = 12;
  c.vocab = vocab;
  c.inject_layers = {0, 2};
  c.lora_rank = 2;
  c.lora_alpha = 4.0;
  return c;
}

// Gives every zero-initialised adapter tensor random values so that the
// visual pathway and LoRA deltas are active.
inline void randomize_group(ParameterStore& store, const std::string& group, Rng& rng, double sd = 0.3) {
  for (const auto& n : store.names_in_group(group)) {
    auto d = store.get(n).mutable_data();
    for (auto& v : d) v = rng.normal(0.0, sd);
  }
}

// A few-thousand-parameter model matched to a benchmark of `d_v`-dim slices.
inline ModelConfig tiny_model(std::size_t vocab, std::size_t d_v = 8, std::size_t classes = 6) {
  ModelConfig m;
  m.classes = classes;
  m.encoder.d_v = d_v;
  m.encoder.tokens = 4;
  m.encoder.heads = 2;
  m.encoder.ffn = 16;
  m.bridge.d_v = d_v;
  m.bridge.d_llm = 16;
  m.bridge.head_hidden = 8;
  m.bridge.whitened_dim = 4;
  m.decoder.layers = 2;
  m.decoder.d_model = 16;
  m.decoder.heads = 2;
  m.decoder.ffn = 32;
  m.decoder.vocab = vocab;
  m.decoder.inject_layers = {0, 1};
  m.decoder.lora_rank = 2;
  m.decoder.lora_alpha = 4.0;
  return m;
}

inline DatasetConfig tiny_world(std::size_t d_v = 8) {
  DatasetConfig c;
  c.d_v = d_v;
  c.zones = 4;
  c.n_min = 12;
  c.n_max = 24;
  return c;
}

}  // namespace glab::testing
