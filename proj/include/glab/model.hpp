// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glab/bridge.hpp"
#include "glab/checkpoint.hpp"
#include "glab/config.hpp"
#include "glab/decoder.hpp"
#include "glab/encoder.hpp"
#include "glab/nn.hpp"

namespace glab {

// Every trainable piece of the grafted model, sharing one parameter store.
// Heads: pooled/per-token condition classifier over visual tokens, the
// visual-to-whitened projection used by the token-level MMD, the classifier
// over decoder hidden states, and the contrastive log-temperature.
class GlabModel {
 public:
  explicit GlabModel(ModelConfig cfg, uint64_t seed = 0)
      : cfg_(validated(std::move(cfg))),
        rng_(seed),
        encoder(cfg_.encoder, store, rng_),
        predictor(cfg_.bridge, store, rng_),
        calibrator(1.0, store),
        embed_head(cfg_.bridge, store, rng_),
        decoder(cfg_.decoder, store, rng_) {
    const std::size_t c = cfg_.classes, dv = cfg_.encoder.d_v, dl = cfg_.decoder.d_model, dw = cfg_.bridge.whitened_dim;
    cls_w = store.add("heads.cls.weight", nn::normal_init({c, dv}, 0.01, rng_), "heads");
    cls_b = store.add("heads.cls.bias", nn::zeros({c}), "heads");
    mmd_w = store.add("heads.mmd.weight", nn::normal_init({dw, dv}, 1.0 / std::sqrt(static_cast<double>(dv)), rng_),
                      "heads");
    mmd_b = store.add("heads.mmd.bias", nn::zeros({dw}), "heads");
    vcls_w = store.add("heads.vcls.weight", nn::normal_init({c, dl}, 0.01, rng_), "heads");
    vcls_b = store.add("heads.vcls.bias", nn::zeros({c}), "heads");
    log_tau = store.add("heads.nce.log_tau", Tensor::scalar(std::log(0.1)), "heads");
    w_mean_ = store.add("whitening.mean", nn::zeros({dl}), "whitening", true);
    w_axes_ = store.add("whitening.axes", nn::zeros({dw, dl}), "whitening", true);
    w_scales_ = store.add("whitening.scales", nn::ones({dw}), "whitening", true);
    w_var_ = store.add("whitening.variance_retained", Tensor::scalar(0.0), "whitening", true);
  }

  GlabModel(const GlabModel&) = delete;
  GlabModel& operator=(const GlabModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  std::size_t tokens() const { return cfg_.encoder.tokens; }
  std::size_t classes() const { return cfg_.classes; }

  // V′ (K × d_v).
  Tensor visual_tokens(const SliceSequence& seq) const { return encoder.forward(seq); }

  // Ṽ = α · LN(Linear(Dropout(V′))).
  Tensor calibrated(const Tensor& v, bool training = false, uint64_t seed = 0, uint64_t counter = 0) const {
    return calibrator.apply(predictor.forward(v, training, seed, counter));
  }

  // Pooled condition logits (1 × C) and per-token logits (K × C).
  Tensor cls_logits(const Tensor& v) const { return nn::linear(mean_rows(v), cls_w, cls_b); }
  Tensor token_logits(const Tensor& v) const { return nn::linear(v, cls_w, cls_b); }
  Tensor mmd_rows(const Tensor& v) const { return nn::linear(v, mmd_w, mmd_b); }

  GraftedPrompt prompt(Tensor visual) const {
    const std::size_t k = visual.defined() ? visual.rows() : 0;
    return make_chat_prompt(cfg_.decoder.special, k, std::move(visual));
  }

  // Mean of the text-layer hidden states over each sequence, base weights
  // only and no visual input (M × d_ℓ).
  Tensor text_embeddings(const std::vector<std::vector<std::size_t>>& seqs, std::size_t chunk = 64) {
    NoGradGuard ng;
    const bool lora = decoder.lora_enabled();
    decoder.set_lora_enabled(false);
    const std::size_t d = cfg_.decoder.d_model;
    std::vector<double> out;
    out.reserve(seqs.size() * d);
    for (std::size_t s0 = 0; s0 < seqs.size(); s0 += chunk) {
      DecoderBatch b;
      const std::size_t s1 = std::min(seqs.size(), s0 + chunk);
      for (std::size_t s = s0; s < s1; ++s) b.append(seqs[s], std::vector<bool>(seqs[s].size(), false), 0);
      const Tensor h = decoder.forward(b, static_cast<int>(cfg_.text_layer_index())).captured;
      for (std::size_t s = 0; s < s1 - s0; ++s) {
        std::vector<double> mu(d, 0.0);
        for (std::size_t i = b.offsets[s]; i < b.offsets[s + 1]; ++i)
          for (std::size_t j = 0; j < d; ++j) mu[j] += h(i, j);
        const double n = static_cast<double>(b.offsets[s + 1] - b.offsets[s]);
        for (double v : mu) out.push_back(v / n);
      }
    }
    decoder.set_lora_enabled(lora);
    return Tensor::from({seqs.size(), d}, std::move(out));
  }

  bool whitening_fitted() const { return w_var_.item() > 0.0; }

  WhiteningTransform whitening() const {
    WhiteningTransform w;
    w.dim = cfg_.bridge.whitened_dim;
    w.input_dim = cfg_.decoder.d_model;
    w.mean.assign(w_mean_.data().begin(), w_mean_.data().end());
    w.axes.assign(w_axes_.data().begin(), w_axes_.data().end());
    w.scales.assign(w_scales_.data().begin(), w_scales_.data().end());
    w.variance_retained = w_var_.item();
    return w;
  }

  void set_whitening(const WhiteningTransform& w) {
    if (w.dim != cfg_.bridge.whitened_dim || w.input_dim != cfg_.decoder.d_model) {
      throw ShapeError("set_whitening: transform dimensions do not match the model");
    }
    store.assign("whitening.mean", w.mean);
    store.assign("whitening.axes", w.axes);
    store.assign("whitening.scales", w.scales);
    store.assign("whitening.variance_retained", std::vector<double>{w.variance_retained});
  }

  // Model description carried in checkpoint metadata.
  nlohmann::json metadata() const {
    return {{"model", to_json(cfg_)}, {"target_norm", calibrator.target_norm()}};
  }

  // Builds a model of the recorded architecture and loads the tensors.
  static std::unique_ptr<GlabModel> from_checkpoint(const Checkpoint& c) {
    if (!c.metadata.contains("model")) throw CheckpointError("checkpoint carries no model description");
    ModelConfig cfg;
    try {
      cfg = model_config_from_json(c.metadata.at("model"));
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint model description: ") + e.what());
    }
    auto m = std::make_unique<GlabModel>(cfg);
    restore_checkpoint(c, m->store);
    m->calibrator.set_target_norm(c.metadata.value("target_norm", 1.0));
    return m;
  }

  Checkpoint checkpoint(const AdamW* opt = nullptr, nlohmann::json extra = nlohmann::json::object()) const {
    nlohmann::json meta = metadata();
    for (auto& [k, v] : extra.items()) meta[k] = v;
    return capture_checkpoint(store, opt, std::move(meta));
  }

 private:
  static ModelConfig validated(ModelConfig c) {
    c.validate();
    return c;
  }

  ModelConfig cfg_;

 public:
  ParameterStore store;

 private:
  Rng rng_;

 public:
  VisualEncoder encoder;
  JepaPredictor predictor;
  NormCalibrator calibrator;
  EmbedHead embed_head;
  Decoder decoder;
  Tensor cls_w, cls_b, mmd_w, mmd_b, vcls_w, vcls_b, log_tau;

 private:
  Tensor w_mean_, w_axes_, w_scales_, w_var_;
};

}  // namespace glab
