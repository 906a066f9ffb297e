// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "glab/core/linalg.hpp"
#include "glab/core/ops.hpp"
#include "glab/core/parameter_store.hpp"
#include "glab/nn.hpp"

namespace glab {

struct BridgeConfig {
  std::size_t d_v = 64;
  std::size_t d_llm = 128;
  std::size_t head_hidden = 64;  // Linear₁ width of the embedding head
  std::size_t whitened_dim = 16; // D
  double dropout = 0.1;
  double init_scale = 0.1;
};

// Dropout → Linear(d_v → d_ℓ) → LayerNorm.
class JepaPredictor {
 public:
  JepaPredictor(const BridgeConfig& cfg, ParameterStore& store, Rng& rng) : cfg_(cfg) {
    w_ = store.add("predictor.linear.weight",
                   nn::normal_init({cfg.d_llm, cfg.d_v}, 1.0 / std::sqrt(static_cast<double>(cfg.d_v)), rng),
                   "predictor");
    b_ = store.add("predictor.linear.bias", nn::zeros({cfg.d_llm}), "predictor");
    g_ = store.add("predictor.norm.weight", nn::ones({cfg.d_llm}), "predictor");
    beta_ = store.add("predictor.norm.bias", nn::zeros({cfg.d_llm}), "predictor");
  }

  Tensor forward(const Tensor& tokens, bool training, uint64_t seed = 0, uint64_t counter = 0) const {
    const Tensor x = dropout(tokens, cfg_.dropout, training, seed, counter);
    return layer_norm(nn::linear(x, w_, b_), g_, beta_);
  }

  // Column i of the weight is set to init_scale · (i-th principal axis of the
  // centred text-embedding corpus). Columns beyond the corpus rank keep their
  // random initialisation.
  void init_from_text_embeddings(const Tensor& text_emb) {
    const std::size_t m = text_emb.rows(), d = text_emb.cols();
    if (d != cfg_.d_llm) throw ShapeError("predictor init: text embedding width mismatch");
    std::vector<double> centred(text_emb.data().begin(), text_emb.data().end());
    for (std::size_t j = 0; j < d; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < m; ++i) mu += centred[i * d + j];
      mu /= static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) centred[i * d + j] -= mu;
    }
    const std::size_t k = std::min({cfg_.d_v, d, m});
    const ThinSvd svd = svd_thin(Tensor::from({m, d}, std::move(centred)), k);
    auto w = w_.mutable_data();
    for (std::size_t c = 0; c < k; ++c) {
      if (svd.s[c] <= 1e-12) break;
      for (std::size_t r = 0; r < d; ++r) w[r * cfg_.d_v + c] = cfg_.init_scale * svd.vt(c, r);
    }
  }

  const Tensor& weight() const { return w_; }
  const Tensor& bias() const { return b_; }

 private:
  BridgeConfig cfg_;
  Tensor w_, b_, g_, beta_;
};

// Ṽ = α·V̂. α is a learned scalar that recalibrate() resets to
// target_norm / mean-row-norm(V̂).
class NormCalibrator {
 public:
  NormCalibrator(double target_norm, ParameterStore& store) : target_(target_norm) {
    if (!(target_norm > 0.0)) throw ContractError("NormCalibrator: target_norm must be positive");
    alpha_ = store.add("calibrator.alpha", Tensor::scalar(1.0), "calibrator");
  }

  Tensor apply(const Tensor& pred) const { return mul(pred, alpha_); }

  double recalibrate(const Tensor& pred) {
    const double m = nn::mean_row_norm(pred);
    if (!(m > 0.0)) throw ContractError("NormCalibrator: cannot recalibrate on zero-norm input");
    const double a = target_ / m;
    alpha_.mutable_data()[0] = a;
    return a;
  }

  double alpha() const { return alpha_.item(); }
  double target_norm() const { return target_; }
  void set_target_norm(double t) {
    if (!(t > 0.0)) throw ContractError("NormCalibrator: target_norm must be positive");
    target_ = t;
  }

 private:
  double target_;
  Tensor alpha_;
};

// Mean-pool → Linear₁ → LN → GELU → Linear₂, into the D-dim whitened space.
class EmbedHead {
 public:
  EmbedHead(const BridgeConfig& cfg, ParameterStore& store, Rng& rng) {
    w1_ = store.add("heads.embed.fc1.weight",
                    nn::normal_init({cfg.head_hidden, cfg.d_llm}, 1.0 / std::sqrt(static_cast<double>(cfg.d_llm)), rng),
                    "heads");
    b1_ = store.add("heads.embed.fc1.bias", nn::zeros({cfg.head_hidden}), "heads");
    g_ = store.add("heads.embed.norm.weight", nn::ones({cfg.head_hidden}), "heads");
    beta_ = store.add("heads.embed.norm.bias", nn::zeros({cfg.head_hidden}), "heads");
    w2_ = store.add("heads.embed.fc2.weight",
                    nn::normal_init({cfg.whitened_dim, cfg.head_hidden},
                                    1.0 / std::sqrt(static_cast<double>(cfg.head_hidden)), rng),
                    "heads");
    b2_ = store.add("heads.embed.fc2.bias", nn::zeros({cfg.whitened_dim}), "heads");
  }

  // Per-row projection without pooling (K × D).
  Tensor project_rows(const Tensor& x) const {
    return nn::linear(gelu(layer_norm(nn::linear(x, w1_, b1_), g_, beta_)), w2_, b2_);
  }

  // 1 × D.
  Tensor forward(const Tensor& tokens) const { return project_rows(mean_rows(tokens)); }

 private:
  Tensor w1_, b1_, g_, beta_, w2_, b2_;
};

// PCA whitening: z = scales ⊙ (axes · (x − mean)).
struct WhiteningTransform {
  std::vector<double> mean;    // d
  std::vector<double> axes;    // D × d, row-major, orthonormal rows
  std::vector<double> scales;  // D
  std::size_t dim = 0;         // D
  std::size_t input_dim = 0;   // d
  double variance_retained = 0.0;

  std::vector<double> apply(std::span<const double> x) const {
    if (x.size() != input_dim) throw ShapeError("apply_whitening: input width mismatch");
    std::vector<double> z(dim, 0.0);
    for (std::size_t k = 0; k < dim; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < input_dim; ++j) s += axes[k * input_dim + j] * (x[j] - mean[j]);
      z[k] = scales[k] * s;
    }
    return z;
  }

  // Row-wise on an (M × d) tensor, differentiable in x.
  Tensor apply_rows(const Tensor& x) const {
    const Tensor mu = Tensor::from({1, input_dim}, mean);
    const Tensor ax = Tensor::from({dim, input_dim}, axes);
    const Tensor sc = Tensor::from({1, dim}, scales);
    return mul(matmul_bt(sub(x, mu), ax), sc);
  }
};

inline WhiteningTransform fit_whitening(const Tensor& emb, std::size_t dim) {
  const std::size_t m = emb.rows(), d = emb.cols();
  if (m <= dim) {
    throw ContractError("fit_whitening: need more than D=" + std::to_string(dim) + " samples, got " +
                        std::to_string(m));
  }
  if (dim == 0 || dim > d) throw ContractError("fit_whitening: D must be in [1, input width]");
  WhiteningTransform w;
  w.dim = dim;
  w.input_dim = d;
  w.mean.assign(d, 0.0);
  const auto x = emb.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) w.mean[j] += x[i * d + j];
  for (auto& v : w.mean) v /= static_cast<double>(m);
  detail::RowMat centred(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j)
      centred(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = x[i * d + j] - w.mean[j];
  const detail::RowMat cov = (centred.transpose() * centred) / static_cast<double>(m - 1);
  const SymmetricEigen eig = symmetric_eigen(cov);
  double total = 0.0;
  for (double v : eig.values) total += std::max(v, 0.0);
  const double tol = 1e-10 * std::max(eig.values.front(), 0.0);
  if (!(eig.values[dim - 1] > tol) || total <= 0.0) {
    throw ContractError("fit_whitening: fewer than D=" + std::to_string(dim) + " nonzero eigenvalues");
  }
  double kept = 0.0;
  w.axes.resize(dim * d);
  w.scales.resize(dim);
  for (std::size_t k = 0; k < dim; ++k) {
    kept += eig.values[k];
    w.scales[k] = 1.0 / std::sqrt(eig.values[k]);
    // Deterministic sign: largest-magnitude component positive.
    std::size_t arg = 0;
    for (std::size_t j = 0; j < d; ++j)
      if (std::abs(eig.vectors(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k))) >
          std::abs(eig.vectors(static_cast<Eigen::Index>(arg), static_cast<Eigen::Index>(k))))
        arg = j;
    const double sgn = eig.vectors(static_cast<Eigen::Index>(arg), static_cast<Eigen::Index>(k)) < 0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j)
      w.axes[k * d + j] = sgn * eig.vectors(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
  }
  w.variance_retained = std::min(1.0, kept / total);
  return w;
}

inline std::vector<double> apply_whitening(std::span<const double> x, const WhiteningTransform& w) {
  return w.apply(x);
}

struct AnisotropyReport {
  double mean_pairwise_cos = 0.0;
  double d_prime = 0.0;  // +inf when both pair distributions have zero variance
};

using IndexPair = std::pair<std::size_t, std::size_t>;

namespace detail {

inline double row_cos(std::span<const double> x, std::size_t d, std::size_t i, std::size_t j) {
  double dot = 0.0, ni = 0.0, nj = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    dot += x[i * d + c] * x[j * d + c];
    ni += x[i * d + c] * x[i * d + c];
    nj += x[j * d + c] * x[j * d + c];
  }
  const double den = std::sqrt(ni) * std::sqrt(nj);
  return den > 0.0 ? dot / den : 0.0;
}

}  // namespace detail

// Mean cosine over all unordered pairs (exact up to 2000 rows, otherwise
// 10000 pairs drawn with a fixed seed) and the sensitivity index
// d′ = (μ_match − μ_mismatch) / sqrt(½(σ²_match + σ²_mismatch)).
inline AnisotropyReport anisotropy_report(const Tensor& emb, const std::vector<IndexPair>& matched,
                                          const std::vector<IndexPair>& mismatched, uint64_t seed = 1234) {
  const std::size_t m = emb.rows(), d = emb.cols();
  if (m < 2) throw ContractError("anisotropy_report: need at least 2 embeddings");
  const auto x = emb.data();
  AnisotropyReport rep;
  double s = 0.0;
  std::size_t cnt = 0;
  if (m <= 2000) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) {
        s += detail::row_cos(x, d, i, j);
        ++cnt;
      }
  } else {
    Rng rng(seed);
    while (cnt < 10000) {
      const std::size_t i = rng.index(m), j = rng.index(m);
      if (i == j) continue;
      s += detail::row_cos(x, d, i, j);
      ++cnt;
    }
  }
  rep.mean_pairwise_cos = s / static_cast<double>(cnt);
  if (matched.empty() || mismatched.empty()) return rep;
  auto stats = [&](const std::vector<IndexPair>& pairs) {
    double mu = 0.0, var = 0.0;
    std::vector<double> c;
    c.reserve(pairs.size());
    for (const auto& [i, j] : pairs) c.push_back(detail::row_cos(x, d, i, j));
    for (double v : c) mu += v;
    mu /= static_cast<double>(c.size());
    for (double v : c) var += (v - mu) * (v - mu);
    var /= static_cast<double>(c.size() > 1 ? c.size() - 1 : 1);
    return std::pair{mu, var};
  };
  const auto [mu1, v1] = stats(matched);
  const auto [mu0, v0] = stats(mismatched);
  const double pooled = std::sqrt(0.5 * (v1 + v0));
  rep.d_prime = pooled > 0.0 ? (mu1 - mu0) / pooled : std::numeric_limits<double>::infinity();
  return rep;
}

}  // namespace glab
