// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "glab/core/ops.hpp"
#include "glab/core/parameter_store.hpp"

namespace glab {

struct LabelVector {
  std::vector<bool> values;
  std::size_t size() const { return values.size(); }
  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), true));
  }
  bool operator==(const LabelVector&) const = default;
};

struct LossWeights {
  double cls = 1.5;
  double mil = 1.0;
  double orth = 1.0;
  double mmd = 0.5;
  double fcls = 1.0;
  double jepa = 0.5;
  double vcls = 3.0;
  double ewc = 100.0;
  double focal_gamma = 2.0;
  double imq_gamma = 5.0;
};

inline Tensor label_tensor(const LabelVector& y) {
  std::vector<double> d(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) d[i] = y.values[i] ? 1.0 : 0.0;
  return Tensor::from({1, y.size()}, std::move(d));
}

// w_c = min(n_neg / n_pos, cap); a class with no positives gets the cap.
inline std::vector<double> positive_weights(const std::vector<std::size_t>& n_pos,
                                            const std::vector<std::size_t>& n_neg, double cap = 10.0) {
  if (n_pos.size() != n_neg.size()) throw ShapeError("positive_weights: count vectors differ in length");
  std::vector<double> w(n_pos.size());
  for (std::size_t c = 0; c < w.size(); ++c) {
    w[c] = n_pos[c] == 0 ? cap
                         : std::min(static_cast<double>(n_neg[c]) / static_cast<double>(n_pos[c]), cap);
  }
  return w;
}

namespace detail {
inline void check_logits(const Tensor& logits, const LabelVector& y, const char* op) {
  if (logits.numel() != y.size()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(logits.numel()) + " logits for " +
                     std::to_string(y.size()) + " labels");
  }
}
}  // namespace detail

// mean_c [ w_c·y_c·softplus(−x_c) + (1 − y_c)·softplus(x_c) ].
inline Tensor bce_pos_weighted(const Tensor& logits, const LabelVector& y, const std::vector<double>& pos_w) {
  detail::check_logits(logits, y, "bce_pos_weighted");
  if (pos_w.size() != y.size()) throw ShapeError("bce_pos_weighted: weight count mismatch");
  const Tensor x = reshape(logits, {1, y.size()});
  std::vector<double> pw(y.size()), nw(y.size());
  for (std::size_t c = 0; c < y.size(); ++c) {
    pw[c] = y.values[c] ? pos_w[c] : 0.0;
    nw[c] = y.values[c] ? 0.0 : 1.0;
  }
  const Tensor pos = mul(softplus(neg(x)), Tensor::from({1, y.size()}, pw));
  const Tensor negt = mul(softplus(x), Tensor::from({1, y.size()}, nw));
  return mean(add(pos, negt));
}

inline Tensor bce(const Tensor& logits, const LabelVector& y) {
  return bce_pos_weighted(logits, y, std::vector<double>(y.size(), 1.0));
}

// Class-wise max over the K token logits, then weighted BCE.
inline Tensor mil_loss(const Tensor& token_logits, const LabelVector& y, const std::vector<double>& pos_w) {
  if (token_logits.rows() == 0) throw ContractError("mil_loss: K must be >= 1");
  if (token_logits.cols() != y.size()) throw ShapeError("mil_loss: class count mismatch");
  return bce_pos_weighted(max_over_rows(token_logits), y, pos_w);
}

// ‖G − I‖²_F / K², G the Gram matrix of the row-normalised tokens.
inline Tensor orthogonality_loss(const Tensor& tokens) {
  const std::size_t k = tokens.rows();
  if (k < 2) throw ContractError("orthogonality_loss: need K >= 2");
  for (std::size_t r = 0; r < k; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < tokens.cols(); ++j) s += tokens(r, j) * tokens(r, j);
    if (!(s > 0.0)) throw ContractError("orthogonality_loss: zero-norm token row " + std::to_string(r));
  }
  const Tensor g = cosine_similarity(tokens, tokens);
  std::vector<double> eye(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) eye[i * k + i] = 1.0;
  const Tensor diff = sub(g, Tensor::from({k, k}, std::move(eye)));
  return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(k * k));
}

// α = 4γ / (2D − 3) of the inverse multi-quadratic kernel.
inline double imq_alpha(double gamma, std::size_t dim) {
  if (dim < 2) throw ContractError("imq_kernel: D must be >= 2");
  return 4.0 * gamma / (2.0 * static_cast<double>(dim) - 3.0);
}

inline double imq_kernel(std::span<const double> x, std::span<const double> y, double gamma, std::size_t dim) {
  if (x.size() != y.size()) throw ShapeError("imq_kernel: length mismatch");
  const double a = imq_alpha(gamma, dim);
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - y[i]) * (x[i] - y[i]);
  return 1.0 / std::sqrt(1.0 + a * d2);
}

namespace detail {
inline Tensor imq_matrix(const Tensor& a, const Tensor& b, double alpha) {
  return pow(add_scalar(scale(pairwise_sqdist(a, b), alpha), 1.0), -0.5);
}

// Mean kernel value within one set: U-statistic drops the diagonal.
inline Tensor within_mean(const Tensor& kmat, bool unbiased) {
  const std::size_t n = kmat.rows();
  if (!unbiased) return mean(kmat);
  // Diagonal of an IMQ Gram matrix is exactly 1.
  return scale(add_scalar(sum(kmat), -static_cast<double>(n)), 1.0 / static_cast<double>(n * (n - 1)));
}
}  // namespace detail

// E[k(v,v′)] − 2E[k(v,t)] + E[k(t,t′)] with the IMQ kernel. Uses the unbiased
// U-statistic when both sets have at least two rows, else the V-statistic.
inline Tensor mmd_imq(const Tensor& zv, const Tensor& zt, double gamma) {
  if (zv.rows() == 0 || zt.rows() == 0) throw ContractError("mmd_imq: empty sample set");
  if (zv.cols() != zt.cols()) throw ShapeError("mmd_imq: dimension mismatch");
  const double a = imq_alpha(gamma, zv.cols());
  const bool unbiased = zv.rows() >= 2 && zt.rows() >= 2;
  const Tensor kvv = detail::within_mean(detail::imq_matrix(zv, zv, a), unbiased);
  const Tensor ktt = detail::within_mean(detail::imq_matrix(zt, zt, a), unbiased);
  const Tensor kvt = mean(detail::imq_matrix(zv, zt, a));
  return add(sub(kvv, scale(kvt, 2.0)), ktt);
}

// Cross-entropy over cosine similarities / τ with matching rows as targets.
// `log_tau` is a scalar tensor; τ = exp(log_tau).
inline Tensor info_nce(const Tensor& zv, const Tensor& zt, const Tensor& log_tau, bool symmetric = false) {
  const std::size_t b = zv.rows();
  if (b == 0 || zt.rows() != b) throw ShapeError("info_nce: batch size mismatch");
  const Tensor inv_tau = exp(neg(log_tau));
  const Tensor logits = mul(cosine_similarity(zv, zt), inv_tau);
  std::vector<std::size_t> tgt(b);
  for (std::size_t i = 0; i < b; ++i) tgt[i] = i;
  const std::vector<double> w(b, 1.0 / static_cast<double>(b));
  Tensor loss = softmax_cross_entropy(logits, tgt, w);
  if (symmetric) loss = scale(add(loss, softmax_cross_entropy(transpose(logits), tgt, w)), 0.5);
  return loss;
}

inline constexpr double kTauMin = 0.01;
inline constexpr double kTauMax = 1.0;

inline void clamp_log_tau(Tensor& log_tau) {
  auto d = log_tau.mutable_data();
  d[0] = std::clamp(d[0], std::log(kTauMin), std::log(kTauMax));
}

// mean_c −(1 − p_t)^γ · log p_t, p = σ(x).
inline Tensor focal_loss(const Tensor& logits, const LabelVector& y, double gamma = 2.0) {
  detail::check_logits(logits, y, "focal_loss");
  const std::size_t c = y.size();
  const Tensor x = reshape(logits, {1, c});
  // Signed logits: s = x for positives, −x for negatives, so p_t = σ(s).
  std::vector<double> sign(c);
  for (std::size_t i = 0; i < c; ++i) sign[i] = y.values[i] ? 1.0 : -1.0;
  const Tensor s = mul(x, Tensor::from({1, c}, std::move(sign)));
  const Tensor nll = softplus(neg(s));             // −log p_t
  const Tensor mod = pow(sigmoid(neg(s)), gamma);  // (1 − p_t)^γ
  return mean(mul(mod, nll));
}

// Mean token cross-entropy over positions with mask true.
inline Tensor lm_loss_masked(const Tensor& logits, const std::vector<std::size_t>& targets,
                             const std::vector<bool>& mask) {
  if (mask.size() != logits.rows()) throw ShapeError("lm_loss_masked: mask length mismatch");
  const auto n = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (n == 0) throw ContractError("lm_loss_masked: response mask is empty");
  std::vector<double> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? 1.0 / static_cast<double>(n) : 0.0;
  return softmax_cross_entropy(logits, targets, w);
}

enum class JepaLossKind { kMse, kCosine };

inline Tensor jepa_embed_loss(const Tensor& zv, const Tensor& zt, JepaLossKind kind = JepaLossKind::kMse) {
  if (zv.numel() != zt.numel()) throw ShapeError("jepa_embed_loss: dimension mismatch");
  const Tensor a = reshape(zv, {1, zv.numel()});
  const Tensor b = reshape(zt, {1, zt.numel()});
  if (kind == JepaLossKind::kCosine) return add_scalar(neg(sum(cosine_similarity(a, b))), 1.0);
  const Tensor d = sub(a, b);
  return mean(mul(d, d));
}

// Mean-pool the hidden rows at placeholder positions, classify linearly,
// score with the focal loss.
inline Tensor llm_visual_cls_loss(const Tensor& last_hidden, const std::vector<bool>& placeholder_mask,
                                  const Tensor& weight, const Tensor& bias, const LabelVector& y,
                                  double gamma = 2.0) {
  if (placeholder_mask.size() != last_hidden.rows()) throw ShapeError("llm_visual_cls_loss: mask length mismatch");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < placeholder_mask.size(); ++i)
    if (placeholder_mask[i]) idx.push_back(i);
  if (idx.empty()) throw ContractError("llm_visual_cls_loss: no placeholder positions");
  const Tensor pooled = mean_rows(gather_rows(last_hidden, idx));
  return focal_loss(add(matmul_bt(pooled, weight), bias), y, gamma);
}

// λ Σ over LoRA tensors of ‖θ − θ_ref‖².
inline Tensor ewc_penalty(const ParameterStore& store, const std::map<std::string, std::vector<double>>& refs,
                          double lambda) {
  const auto lora = store.names_in_group("lora");
  for (const auto& [name, _] : refs) {
    if (!store.contains(name) || store.entry(name).group != "lora") {
      throw ContractError("ewc_penalty: reference '" + name + "' is not a LoRA tensor");
    }
  }
  std::vector<Tensor> terms;
  for (const auto& name : lora) {
    auto it = refs.find(name);
    if (it == refs.end()) throw ContractError("ewc_penalty: missing reference tensor '" + name + "'");
    const Tensor& t = store.get(name);
    if (it->second.size() != t.numel()) throw ShapeError("ewc_penalty: reference shape mismatch for '" + name + "'");
    const Tensor d = sub(t, Tensor::from(t.shape(), it->second));
    terms.push_back(sum(mul(d, d)));
  }
  Tensor total = Tensor::scalar(0.0);
  for (const auto& t : terms) total = add(t, total);
  return scale(total, lambda);
}

inline std::map<std::string, std::vector<double>> snapshot_group(const ParameterStore& store, const std::string& group) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& e : store.entries())
    if (e.group == group) out[e.name].assign(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

// Individual loss terms of one step; absent terms contribute nothing.
struct LossParts {
  std::optional<Tensor> bce, mil, orth, mmd;          // Phase 1
  std::optional<Tensor> nce;                          // Phase 2
  std::optional<Tensor> lm, focal, jepa, vcls, ewc;   // Phases 3–4 (ewc already λ-scaled)
};

enum class PhaseEquation { kPhase1, kPhase2, kPhase3, kPhase4 };

inline Tensor compose_phase_loss(PhaseEquation eq, const LossWeights& w, const LossParts& p) {
  Tensor total = Tensor::scalar(0.0);
  auto term = [&](const std::optional<Tensor>& t, double lambda) {
    if (t && lambda != 0.0) total = add(scale(*t, lambda), total);
  };
  switch (eq) {
    case PhaseEquation::kPhase1:
      term(p.bce, w.cls);
      term(p.mil, w.mil);
      term(p.orth, w.orth);
      term(p.mmd, w.mmd);
      break;
    case PhaseEquation::kPhase2:
      term(p.nce, 1.0);
      term(p.mmd, w.mmd);
      break;
    case PhaseEquation::kPhase3:
      term(p.lm, 1.0);
      term(p.focal, w.fcls);
      term(p.jepa, w.jepa);
      term(p.vcls, w.vcls);
      break;
    case PhaseEquation::kPhase4:
      term(p.lm, 1.0);
      term(p.focal, w.cls);
      term(p.ewc, 1.0);
      break;
  }
  return total;
}

}  // namespace glab
