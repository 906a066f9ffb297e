// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "glab/core/ops.hpp"
#include "glab/core/parameter_store.hpp"
#include "glab/nn.hpp"

namespace glab {

// Reserved ids shared by the tokenizer and the chat template.
struct SpecialTokens {
  std::size_t pad = 0;
  std::size_t bos = 1;
  std::size_t sys = 2;
  std::size_t vis = 3;
  std::size_t usr = 4;
  std::size_t asst = 5;
  std::size_t eor = 6;
};

struct DecoderConfig {
  std::size_t layers = 8;
  std::size_t d_model = 128;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t vocab = 256;
  std::vector<std::size_t> inject_layers{2, 4, 6};
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  std::size_t max_new_tokens = 384;
  double rope_base = 10000.0;
  double xattn_gain = 0.3;
  bool xattn_tanh_gate = false;
  SpecialTokens special;

  double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }

  void validate() const {
    if (layers == 0 || d_model == 0 || vocab == 0) throw ConfigError("decoder: empty dimension");
    if (d_model % heads != 0 || (d_model / heads) % 2 != 0) {
      throw ConfigError("decoder: heads must divide d_model into even head widths");
    }
    if (lora_rank < 1) throw ConfigError("decoder: lora_rank must be >= 1");
    for (std::size_t i = 0; i < inject_layers.size(); ++i) {
      if (inject_layers[i] >= layers) throw ConfigError("decoder: inject layer out of range");
      if (i > 0 && inject_layers[i] <= inject_layers[i - 1]) {
        throw ConfigError("decoder: inject_layers must be strictly increasing");
      }
    }
  }
};

// Tensor counts per bridge group implied by a config.
struct BridgeLayout {
  std::size_t projectors = 0;
  std::size_t xattn = 0;
  std::size_t lora = 0;
  std::size_t total() const { return projectors + xattn + lora; }
};

inline constexpr std::size_t kLoraTargetsPerLayer = 7;  // q, k, v, o, gate, up, down
inline constexpr std::size_t kXattnTensorsPerAdapter = 7;

inline BridgeLayout bridge_layout(const DecoderConfig& cfg) {
  return {cfg.inject_layers.size(), kXattnTensorsPerAdapter * cfg.inject_layers.size(),
          2 * kLoraTargetsPerLayer * cfg.layers};
}

// A prompt whose placeholder positions are filled with visual rows.
struct GraftedPrompt {
  std::vector<std::size_t> token_ids;
  std::vector<bool> placeholder_mask;
  Tensor visual_tokens;  // K × d_ℓ, may be undefined when K = 0

  std::size_t placeholders() const {
    return static_cast<std::size_t>(std::count(placeholder_mask.begin(), placeholder_mask.end(), true));
  }
};

// [BOS][SYS][VIS]×K[USR][ASST]
inline GraftedPrompt make_chat_prompt(const SpecialTokens& sp, std::size_t k, Tensor visual) {
  GraftedPrompt p;
  p.token_ids = {sp.bos, sp.sys};
  p.token_ids.insert(p.token_ids.end(), k, sp.vis);
  p.token_ids.push_back(sp.usr);
  p.token_ids.push_back(sp.asst);
  p.placeholder_mask.assign(p.token_ids.size(), false);
  for (std::size_t i = 0; i < k; ++i) p.placeholder_mask[2 + i] = true;
  p.visual_tokens = std::move(visual);
  return p;
}

inline void validate_prompt(const GraftedPrompt& p) {
  if (p.placeholder_mask.size() != p.token_ids.size()) throw ShapeError("prompt: mask length mismatch");
  const std::size_t k = p.placeholders();
  const std::size_t rows = p.visual_tokens.defined() ? p.visual_tokens.rows() : 0;
  if (k != rows) {
    throw ContractError("graft: " + std::to_string(k) + " placeholders for " + std::to_string(rows) +
                        " visual tokens");
  }
  if (k > 0) {
    const auto first = std::find(p.placeholder_mask.begin(), p.placeholder_mask.end(), true);
    if (!std::all_of(first, first + static_cast<std::ptrdiff_t>(k), [](bool b) { return b; })) {
      throw ContractError("graft: placeholders must be contiguous");
    }
  }
}

// Text embeddings with placeholder rows replaced by visual rows.
inline Tensor graft(const std::vector<std::size_t>& tokens, const std::vector<bool>& mask, const Tensor& visual,
                    const Tensor& embed_table) {
  const Tensor text = gather_rows(embed_table, tokens);
  const auto k = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  const std::size_t rows = visual.defined() ? visual.rows() : 0;
  if (k != rows) {
    throw ContractError("graft: " + std::to_string(k) + " placeholders for " + std::to_string(rows) +
                        " visual tokens");
  }
  if (k == 0) return text;
  return scatter_rows(text, visual, mask);
}

// base + scale·B·A.
inline Tensor lora_apply(const Tensor& base, const Tensor& a, const Tensor& b, double scale_factor) {
  if (a.cols() != base.cols() || b.rows() != base.rows() || b.cols() != a.rows()) {
    throw ShapeError("lora_apply: base " + shape_str(base.shape()) + ", A " + shape_str(a.shape()) + ", B " +
                     shape_str(b.shape()));
  }
  return add(base, scale(matmul(b, a), scale_factor));
}

// Stacked batch of sequences; sample s owns token rows [offsets[s], offsets[s+1])
// and visual rows [visual_offsets[s], visual_offsets[s+1]).
struct DecoderBatch {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> offsets{0};
  std::vector<bool> placeholder_mask;
  Tensor visual;
  std::vector<std::size_t> visual_offsets{0};

  std::size_t size() const { return offsets.size() - 1; }

  void append(const std::vector<std::size_t>& toks, const std::vector<bool>& mask, std::size_t k_rows) {
    tokens.insert(tokens.end(), toks.begin(), toks.end());
    placeholder_mask.insert(placeholder_mask.end(), mask.begin(), mask.end());
    offsets.push_back(tokens.size());
    visual_offsets.push_back(visual_offsets.back() + k_rows);
  }
};

struct DecoderOutput {
  Tensor logits;       // T × vocab
  Tensor last_hidden;  // T × d_ℓ after the final norm
  Tensor captured;     // T × d_ℓ after block `capture_layer`, if requested
};

// Incremental decoding state of one stream.
struct DecodeCache {
  struct Layer {
    std::vector<double> k, v;  // rows of width d_ℓ, keys already rotated
  };
  std::vector<Layer> layers;
  std::vector<Tensor> xk, xv;  // per adapter, K × d_ℓ
  std::vector<Tensor> weights;  // effective weights reused across steps
  std::size_t position = 0;
  bool has_visual = false;
};

struct SamplingConfig {
  double temperature = 0.6;
  double top_p = 0.9;
  double repetition_penalty = 1.15;
  std::size_t no_repeat_ngram = 5;
  std::size_t max_new_tokens = 384;
  bool greedy = false;
  uint64_t seed = 0;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("sampling: temperature must be > 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("sampling: top_p must be in (0, 1]");
    if (!(repetition_penalty >= 1.0)) throw ConfigError("sampling: repetition_penalty must be >= 1");
  }
};

// Divides positive and multiplies negative logits of already generated tokens.
inline void apply_repetition_penalty(std::vector<double>& logits, const std::vector<std::size_t>& generated,
                                     double penalty) {
  if (penalty == 1.0) return;
  std::vector<bool> seen(logits.size(), false);
  for (std::size_t t : generated) {
    if (t >= logits.size() || seen[t]) continue;
    seen[t] = true;
    logits[t] = logits[t] > 0.0 ? logits[t] / penalty : logits[t] * penalty;
  }
}

// Masks every token that would complete an n-gram already present.
inline void apply_no_repeat_ngram(std::vector<double>& logits, const std::vector<std::size_t>& generated,
                                  std::size_t n) {
  if (n == 0 || generated.size() + 1 < n) return;
  const std::size_t len = generated.size();
  const std::size_t pre = n - 1;
  for (std::size_t i = 0; i + n <= len; ++i) {
    if (std::equal(generated.begin() + static_cast<std::ptrdiff_t>(i),
                   generated.begin() + static_cast<std::ptrdiff_t>(i + pre),
                   generated.begin() + static_cast<std::ptrdiff_t>(len - pre))) {
      const std::size_t banned = generated[i + pre];
      if (banned < logits.size()) logits[banned] = -std::numeric_limits<double>::infinity();
    }
  }
}

inline std::size_t argmax_finite(const std::vector<double>& logits, std::size_t fallback) {
  std::size_t best = fallback;
  double bv = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (std::isfinite(logits[i]) && logits[i] > bv) {
      bv = logits[i];
      best = i;
    }
  }
  return best;
}

// Temperature, nucleus truncation and one inverse-CDF draw with uniform u.
// Kept tokens are walked in vocabulary order, so top_p = 1 coincides with a
// plain multinomial draw over softmax(logits / T) using the same u.
inline std::size_t sample_nucleus(const std::vector<double>& logits, double temperature, double top_p, double u,
                                  std::size_t fallback) {
  const std::size_t v = logits.size();
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : logits)
    if (std::isfinite(x)) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return fallback;
  std::vector<double> p(v, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < v; ++i) {
    if (!std::isfinite(logits[i])) continue;
    p[i] = std::exp((logits[i] - mx) / temperature);
    z += p[i];
  }
  if (!(z > 0.0) || !std::isfinite(z)) return argmax_finite(logits, fallback);
  for (auto& x : p) x /= z;
  std::vector<bool> keep(v, false);
  if (top_p >= 1.0) {
    for (std::size_t i = 0; i < v; ++i) keep[i] = p[i] > 0.0;
  } else {
    std::vector<std::size_t> order(v);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    double cum = 0.0;
    for (std::size_t idx : order) {
      if (p[idx] <= 0.0) break;
      keep[idx] = true;
      cum += p[idx];
      if (cum >= top_p) break;
    }
  }
  double mass = 0.0;
  for (std::size_t i = 0; i < v; ++i)
    if (keep[i]) mass += p[i];
  if (!(mass > 0.0)) return argmax_finite(logits, fallback);
  const double target = u * mass;
  double acc = 0.0;
  std::size_t last = fallback;
  for (std::size_t i = 0; i < v; ++i) {
    if (!keep[i]) continue;
    acc += p[i];
    last = i;
    if (target < acc) return i;
  }
  return last;
}

struct NllResult {
  double mean = 0.0;
  double pathology = 0.0;  // mean over flagged positions, NaN when none
  double generic = 0.0;    // mean over unflagged positions, NaN when none
  std::vector<double> per_position;
};

// Llama-style decoder: pre-norm blocks with RoPE attention and a SwiGLU MLP,
// LoRA on every linear, and residual cross-attention adapters after the
// configured blocks.
class Decoder {
 public:
  Decoder(DecoderConfig cfg, ParameterStore& store, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t d = cfg_.d_model, f = cfg_.ffn, r = cfg_.lora_rank;
    auto base = [&](const std::string& n, Tensor t) { return store.add(n, std::move(t), "base", true); };
    embed_ = base("embed_tokens.weight", nn::normal_init({cfg_.vocab, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    const double wd = 1.0 / std::sqrt(static_cast<double>(d)), wf = 1.0 / std::sqrt(static_cast<double>(f));
    const std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> linears = {
        {"attn.q_proj", {d, d}}, {"attn.k_proj", {d, d}}, {"attn.v_proj", {d, d}}, {"attn.o_proj", {d, d}},
        {"mlp.gate_proj", {f, d}}, {"mlp.up_proj", {f, d}}, {"mlp.down_proj", {d, f}}};
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Layer L;
      L.in_g = base(p + "input_norm.weight", nn::ones({d}));
      L.in_b = base(p + "input_norm.bias", nn::zeros({d}));
      L.post_g = base(p + "post_norm.weight", nn::ones({d}));
      L.post_b = base(p + "post_norm.bias", nn::zeros({d}));
      for (std::size_t i = 0; i < linears.size(); ++i) {
        const auto& [name, dims] = linears[i];
        const double sd = dims.second == f ? wf : wd;
        L.w[i] = base(p + name + ".weight", nn::normal_init({dims.first, dims.second}, sd, rng));
      }
      layers_.push_back(std::move(L));
    }
    final_g_ = base("final_norm.weight", nn::ones({d}));
    final_b_ = base("final_norm.bias", nn::zeros({d}));
    head_ = base("lm_head.weight", nn::normal_init({cfg_.vocab, d}, wd, rng));

    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      for (std::size_t i = 0; i < linears.size(); ++i) {
        const auto& [name, dims] = linears[i];
        layers_[l].a[i] = store.add(p + name + ".lora_A",
                                    nn::normal_init({r, dims.second}, 1.0 / std::sqrt(static_cast<double>(dims.second)), rng),
                                    "lora");
        layers_[l].b[i] = store.add(p + name + ".lora_B", nn::zeros({dims.first, r}), "lora");
      }
    }

    for (std::size_t l : cfg_.inject_layers) {
      const std::string p = "xattn." + std::to_string(l) + ".";
      Adapter A;
      A.q = store.add(p + "q_proj.weight", nn::xavier_uniform(d, d, cfg_.xattn_gain, rng), "xattn");
      A.k = store.add(p + "k_proj.weight", nn::xavier_uniform(d, d, cfg_.xattn_gain, rng), "xattn");
      A.v = store.add(p + "v_proj.weight", nn::xavier_uniform(d, d, cfg_.xattn_gain, rng), "xattn");
      A.o = store.add(p + "o_proj.weight", nn::xavier_uniform(d, d, cfg_.xattn_gain, rng), "xattn");
      A.norm_g = store.add(p + "norm.weight", nn::ones({d}), "xattn");
      A.norm_b = store.add(p + "norm.bias", nn::zeros({d}), "xattn");
      A.gate = store.add(p + "gate", Tensor::scalar(0.0), "xattn");
      adapters_.push_back(std::move(A));
    }
    for (std::size_t l : cfg_.inject_layers) {
      std::vector<double> eye(d * d, 0.0);
      for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
      projectors_.push_back(store.add("projectors." + std::to_string(l) + ".weight",
                                      Tensor::from({d, d}, std::move(eye)), "projectors"));
    }
    calls_.assign(cfg_.inject_layers.size(), 0);
  }

  const DecoderConfig& config() const { return cfg_; }
  const Tensor& embed_table() const { return embed_; }

  void set_lora_enabled(bool on) { lora_on_ = on; }
  bool lora_enabled() const { return lora_on_; }

  // Invocations per adapter since the last reset.
  const std::vector<std::size_t>& adapter_calls() const { return calls_; }
  void reset_adapter_calls() { std::fill(calls_.begin(), calls_.end(), 0); }

  // Mean row norm of the text embedding table.
  double embedding_norm() const { return nn::mean_row_norm(embed_); }

  // Effective weights, layer-major: 7 per layer.
  std::vector<Tensor> effective_weights() const {
    std::vector<Tensor> w;
    w.reserve(cfg_.layers * kLoraTargetsPerLayer);
    for (const auto& L : layers_)
      for (std::size_t i = 0; i < kLoraTargetsPerLayer; ++i)
        w.push_back(lora_on_ ? lora_apply(L.w[i], L.a[i], L.b[i], cfg_.lora_scale()) : L.w[i]);
    return w;
  }

  // Residual cross-attention read of projected visual rows: adapter `slot`.
  Tensor layer_inject(const Tensor& h, const Tensor& visual, std::size_t slot, const AttnMask& mask = {}) const {
    return inject_with(h, project_visual(visual, slot), slot, mask);
  }

  DecoderOutput forward(const DecoderBatch& batch, int capture_layer = -1) const {
    const std::size_t t = batch.tokens.size();
    if (batch.placeholder_mask.size() != t) throw ShapeError("decoder: placeholder mask length mismatch");
    if (t == 0) throw ContractError("decoder: empty batch");
    const std::vector<Tensor> w = effective_weights();
    Tensor x = graft(batch.tokens, batch.placeholder_mask, batch.visual, embed_);
    std::vector<std::size_t> pos(t);
    for (std::size_t s = 0; s < batch.size(); ++s)
      for (std::size_t i = batch.offsets[s]; i < batch.offsets[s + 1]; ++i) pos[i] = i - batch.offsets[s];
    const AttnMask self_mask = AttnMask::segmented(batch.offsets, batch.offsets, true);
    const bool visual = batch.visual.defined() && batch.visual.rows() > 0;
    AttnMask cross_mask;
    if (visual) cross_mask = AttnMask::segmented(batch.offsets, batch.visual_offsets, false);
    DecoderOutput out;
    std::size_t slot = 0;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      x = block(x, l, w, pos, self_mask, nullptr);
      if (slot < cfg_.inject_layers.size() && cfg_.inject_layers[slot] == l) {
        if (visual) x = layer_inject(x, batch.visual, slot, cross_mask);
        ++slot;
      }
      if (static_cast<int>(l) == capture_layer) out.captured = x;
    }
    out.last_hidden = layer_norm(x, final_g_, final_b_);
    out.logits = matmul_bt(out.last_hidden, head_);
    return out;
  }

  DecoderOutput forward(const GraftedPrompt& p, int capture_layer = -1) const {
    validate_prompt(p);
    DecoderBatch b;
    b.append(p.token_ids, p.placeholder_mask, p.placeholders());
    b.visual = p.visual_tokens;
    return forward(b, capture_layer);
  }

  // Runs the prompt and returns the logits of its last position.
  std::vector<double> prefill(const GraftedPrompt& p, DecodeCache& cache) const {
    validate_prompt(p);
    NoGradGuard ng;
    const std::size_t t = p.token_ids.size();
    cache = DecodeCache{};
    cache.layers.resize(cfg_.layers);
    cache.weights = effective_weights();
    cache.has_visual = p.placeholders() > 0;
    Tensor x = graft(p.token_ids, p.placeholder_mask, p.visual_tokens, embed_);
    std::vector<std::size_t> pos(t);
    std::iota(pos.begin(), pos.end(), 0);
    const AttnMask self_mask = AttnMask::causal(0);
    std::size_t slot = 0;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      x = block(x, l, cache.weights, pos, self_mask, &cache.layers[l]);
      if (slot < cfg_.inject_layers.size() && cfg_.inject_layers[slot] == l) {
        if (cache.has_visual) {
          const Tensor pv = project_visual(p.visual_tokens, slot);
          cache.xk.push_back(matmul_bt(pv, adapters_[slot].k));
          cache.xv.push_back(matmul_bt(pv, adapters_[slot].v));
          x = inject_cached(x, cache, slot, {});
        }
        ++slot;
      }
    }
    cache.position = t;
    const Tensor last = slice_rows(x, t - 1, t);
    return logits_of(last);
  }

  // One autoregressive step from the cached state.
  std::vector<double> decode_step(DecodeCache& cache, std::size_t token) const {
    if (cache.layers.size() != cfg_.layers) throw ContractError("decode_step: prefill has not run");
    if (token >= cfg_.vocab) throw ContractError("decode_step: token id out of range");
    NoGradGuard ng;
    Tensor x = gather_rows(embed_, {token});
    const std::vector<std::size_t> pos{cache.position};
    std::size_t slot = 0;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      x = block(x, l, cache.weights, pos, AttnMask::none(), &cache.layers[l], true);
      if (slot < cfg_.inject_layers.size() && cfg_.inject_layers[slot] == l) {
        if (cache.has_visual) x = inject_cached(x, cache, slot, {});
        ++slot;
      }
    }
    ++cache.position;
    return logits_of(x);
  }

  std::vector<std::size_t> generate(const GraftedPrompt& p, const SamplingConfig& sc) const {
    sc.validate();
    Rng rng(sc.seed);
    DecodeCache cache;
    std::vector<double> logits = prefill(p, cache);
    std::vector<std::size_t> out;
    for (std::size_t step = 0; step < sc.max_new_tokens; ++step) {
      apply_repetition_penalty(logits, out, sc.repetition_penalty);
      apply_no_repeat_ngram(logits, out, sc.no_repeat_ngram);
      const double u = rng.uniform();
      const std::size_t next = sc.greedy ? argmax_finite(logits, cfg_.special.eor)
                                         : sample_nucleus(logits, sc.temperature, sc.top_p, u, cfg_.special.eor);
      out.push_back(next);
      // Every emitted token is fed back, so the cache always covers the output.
      logits = decode_step(cache, next);
      if (next == cfg_.special.eor) break;
    }
    return out;
  }

  // Mean NLL of `targets` following the prompt, split by word class.
  NllResult teacher_forced_nll(const GraftedPrompt& p, const std::vector<std::size_t>& targets,
                               const std::vector<bool>& pathology_mask) const {
    if (targets.empty()) throw ContractError("teacher_forced_nll: empty target");
    if (pathology_mask.size() != targets.size()) throw ShapeError("teacher_forced_nll: mask length mismatch");
    NoGradGuard ng;
    GraftedPrompt full = p;
    full.token_ids.insert(full.token_ids.end(), targets.begin(), targets.end() - 1);
    full.placeholder_mask.resize(full.token_ids.size(), false);
    const Tensor logp = log_softmax_rows(forward(full).logits);
    const std::size_t start = p.token_ids.size() - 1;
    NllResult r;
    double sp = 0.0, sg = 0.0;
    std::size_t np = 0, ng_ = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const double nll = -logp(start + i, targets[i]);
      r.per_position.push_back(nll);
      r.mean += nll;
      if (pathology_mask[i]) {
        sp += nll;
        ++np;
      } else {
        sg += nll;
        ++ng_;
      }
    }
    r.mean /= static_cast<double>(targets.size());
    r.pathology = np ? sp / static_cast<double>(np) : std::numeric_limits<double>::quiet_NaN();
    r.generic = ng_ ? sg / static_cast<double>(ng_) : std::numeric_limits<double>::quiet_NaN();
    return r;
  }

  const Tensor& projector(std::size_t slot) const { return projectors_.at(slot); }

 private:
  struct Layer {
    Tensor in_g, in_b, post_g, post_b;
    Tensor w[kLoraTargetsPerLayer], a[kLoraTargetsPerLayer], b[kLoraTargetsPerLayer];
  };
  struct Adapter {
    Tensor q, k, v, o, norm_g, norm_b, gate;
  };

  Tensor project_visual(const Tensor& visual, std::size_t slot) const {
    return matmul_bt(visual, projectors_.at(slot));
  }

  Tensor adapter_output(const Tensor& h, const Tensor& k, const Tensor& v, std::size_t slot,
                        const AttnMask& mask) const {
    const Adapter& A = adapters_.at(slot);
    ++calls_[slot];
    const Tensor q = matmul_bt(layer_norm(h, A.norm_g, A.norm_b), A.q);
    Tensor o = matmul_bt(multi_head_attention(q, k, v, cfg_.heads, mask), A.o);
    if (cfg_.xattn_tanh_gate) o = mul(o, tanh(A.gate));
    return add(h, o);
  }

  Tensor inject_with(const Tensor& h, const Tensor& pv, std::size_t slot, const AttnMask& mask) const {
    const Adapter& A = adapters_.at(slot);
    return adapter_output(h, matmul_bt(pv, A.k), matmul_bt(pv, A.v), slot, mask);
  }

  Tensor inject_cached(const Tensor& h, const DecodeCache& c, std::size_t slot, const AttnMask& mask) const {
    return adapter_output(h, c.xk.at(slot), c.xv.at(slot), slot, mask);
  }

  // One pre-norm block. With `incremental`, the new key/value rows are
  // appended to `cache` and attention reads the whole cached history.
  Tensor block(const Tensor& x, std::size_t l, const std::vector<Tensor>& w, const std::vector<std::size_t>& pos,
               const AttnMask& mask, DecodeCache::Layer* cache, bool incremental = false) const {
    const Layer& L = layers_[l];
    const Tensor* W = &w[l * kLoraTargetsPerLayer];
    const Tensor h = layer_norm(x, L.in_g, L.in_b);
    const Tensor q = rope_at(matmul_bt(h, W[0]), cfg_.heads, pos, cfg_.rope_base);
    Tensor k = rope_at(matmul_bt(h, W[1]), cfg_.heads, pos, cfg_.rope_base);
    Tensor v = matmul_bt(h, W[2]);
    if (cache) {
      cache->k.insert(cache->k.end(), k.data().begin(), k.data().end());
      cache->v.insert(cache->v.end(), v.data().begin(), v.data().end());
      if (incremental) {
        const std::size_t rows = cache->k.size() / cfg_.d_model;
        k = Tensor::from({rows, cfg_.d_model}, cache->k);
        v = Tensor::from({rows, cfg_.d_model}, cache->v);
      }
    }
    const Tensor a = matmul_bt(multi_head_attention(q, k, v, cfg_.heads, mask), W[3]);
    const Tensor x1 = add(x, a);
    const Tensor h2 = layer_norm(x1, L.post_g, L.post_b);
    const Tensor m = matmul_bt(mul(silu(matmul_bt(h2, W[4])), matmul_bt(h2, W[5])), W[6]);
    return add(x1, m);
  }

  std::vector<double> logits_of(const Tensor& row) const {
    const Tensor lg = matmul_bt(layer_norm(row, final_g_, final_b_), head_);
    return {lg.data().begin(), lg.data().end()};
  }

  DecoderConfig cfg_;
  Tensor embed_, final_g_, final_b_, head_;
  std::vector<Layer> layers_;
  std::vector<Adapter> adapters_;
  std::vector<Tensor> projectors_;
  mutable std::vector<std::size_t> calls_;
  bool lora_on_ = true;
};

}  // namespace glab
