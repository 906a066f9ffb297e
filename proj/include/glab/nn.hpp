// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "glab/core/ops.hpp"
#include "glab/core/random.hpp"
#include "glab/core/tensor.hpp"

namespace glab::nn {

// y = x·Wᵀ + b, W stored (out × in).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  Tensor y = matmul_bt(x, w);
  return b.defined() ? add(y, b) : y;
}

inline Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(d));
}

// Glorot uniform for an (out × in) weight.
inline Tensor xavier_uniform(std::size_t out, std::size_t in, double gain, Rng& rng) {
  const double a = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> d(out * in);
  for (auto& v : d) v = (2.0 * rng.uniform() - 1.0) * a;
  return Tensor::from({out, in}, std::move(d));
}

inline Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape)); }
inline Tensor ones(Shape shape) { return Tensor::full(std::move(shape), 1.0); }

// 0/1 column (rows × 1) used to select rows by broadcasting multiply.
inline Tensor row_selector(const std::vector<bool>& keep) {
  std::vector<double> d(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) d[i] = keep[i] ? 1.0 : 0.0;
  return Tensor::from({keep.size(), 1}, std::move(d));
}

inline double row_norm(const Tensor& t, std::size_t r) {
  double s = 0.0;
  for (std::size_t j = 0; j < t.cols(); ++j) s += t(r, j) * t(r, j);
  return std::sqrt(s);
}

inline double mean_row_norm(const Tensor& t) {
  double s = 0.0;
  for (std::size_t r = 0; r < t.rows(); ++r) s += row_norm(t, r);
  return t.rows() ? s / static_cast<double>(t.rows()) : 0.0;
}

}  // namespace glab::nn
