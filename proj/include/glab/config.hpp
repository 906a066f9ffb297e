// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glab/bridge.hpp"
#include "glab/decoder.hpp"
#include "glab/encoder.hpp"
#include "glab/losses.hpp"
#include "glab/optim.hpp"

namespace glab {

using nlohmann::json;

enum class TextMode { kNone, kPositiveFindings, kRawNarrative };

inline TextMode parse_text_mode(const std::string& s) {
  if (s == "none") return TextMode::kNone;
  if (s == "positive_findings") return TextMode::kPositiveFindings;
  if (s == "raw_narrative") return TextMode::kRawNarrative;
  throw ConfigError("unknown text_mode '" + s + "'");
}

inline std::string to_string(TextMode m) {
  switch (m) {
    case TextMode::kNone: return "none";
    case TextMode::kPositiveFindings: return "positive_findings";
    case TextMode::kRawNarrative: return "raw_narrative";
  }
  return "none";
}

namespace detail {

// Rejects keys of `j` outside `allowed`, naming the offending key and scope.
inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& scope) {
  if (!j.is_object()) throw ConfigError(scope + ": expected a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
      throw ConfigError(scope + ": unknown key '" + k + "'");
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& scope) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(scope + ": key '" + key + "' has the wrong type");
  }
}

inline void nonneg(double v, const char* what) {
  if (!(v >= 0.0)) throw ConfigError(std::string(what) + " must be >= 0");
}

}  // namespace detail

struct PhaseConfig {
  int phase_id = 1;
  std::vector<std::string> trainable_groups;
  TextMode text_mode = TextMode::kNone;
  LossWeights weights;
  double lr = 1e-3;
  LrPolicy lr_policy = LrPolicy::kConstant;
  std::size_t plateau_patience = 3;
  double plateau_factor = 0.5;
  std::size_t epochs = 10;
  std::size_t early_stop_patience = 0;  // 0 disables
  std::size_t batch_size = 32;
  std::size_t samples_per_epoch = 0;    // 0 = whole training split
  std::size_t lora_freeze_epoch = 6;    // 0 disables; epochs are 1-based
  double projector_lr_scale_min = 1.0;
  double projector_lr_scale_max = 30.0;
  bool projector_lr_scaling = true;
  std::optional<std::string> warm_bridge_source;
  bool train_encoder = false;           // Phase 2 only
  JepaLossKind jepa_loss = JepaLossKind::kMse;
  bool symmetric_nce = false;
  double init_tau = 0.1;
  std::size_t recalibrate_every = 500;  // optimizer steps; 0 disables
  std::size_t val_samples = 256;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  SamplingConfig sampling;
  uint64_t seed = 1;

  PhaseEquation equation() const { return static_cast<PhaseEquation>(phase_id - 1); }

  void validate() const {
    if (phase_id < 1 || phase_id > 4) throw ConfigError("phase_id must be in {1,2,3,4}");
    for (const auto& g : trainable_groups)
      if (!is_known_group(g)) throw ConfigError("trainable_groups: unknown group '" + g + "'");
    for (double v : {weights.cls, weights.mil, weights.orth, weights.mmd, weights.fcls, weights.jepa, weights.vcls,
                     weights.ewc, weights.focal_gamma, weights.imq_gamma})
      detail::nonneg(v, "loss weight");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("plateau_factor must be in (0, 1)");
    if (plateau_patience == 0) throw ConfigError("plateau_patience must be >= 1");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(projector_lr_scale_min > 0.0 && projector_lr_scale_min <= projector_lr_scale_max)) {
      throw ConfigError("projector_lr_scale_range must satisfy 0 < lo <= hi");
    }
    if (!(init_tau >= kTauMin && init_tau <= kTauMax)) throw ConfigError("init_tau must be in [0.01, 1]");
    if ((phase_id == 3 || phase_id == 4) && text_mode == TextMode::kNone) {
      throw ConfigError("phases 3 and 4 need a text_mode");
    }
    if (phase_id != 2 && train_encoder) throw ConfigError("train_encoder applies to phase 2 only");
    detail::nonneg(weight_decay, "weight_decay");
    detail::nonneg(grad_clip, "grad_clip");
    sampling.validate();
  }
};

// Trainable groups of the reference freeze table.
inline std::vector<std::string> default_trainable_groups(int phase, bool train_encoder = false) {
  switch (phase) {
    case 1: return {"encoder", "heads"};
    case 2: {
      std::vector<std::string> g{"predictor", "heads", "calibrator"};
      if (train_encoder) g.insert(g.begin(), "encoder");
      return g;
    }
    case 3: return {"predictor", "lora", "xattn", "projectors", "heads", "calibrator"};
    case 4: return {"lora", "heads"};
    default: throw ConfigError("phase_id must be in {1,2,3,4}");
  }
}

inline PhaseConfig default_phase_config(int phase) {
  PhaseConfig c;
  c.phase_id = phase;
  c.trainable_groups = default_trainable_groups(phase);
  switch (phase) {
    case 1:
      c.batch_size = 32;
      c.lr = 2e-3;
      c.lr_policy = LrPolicy::kCosine;
      c.epochs = 12;
      break;
    case 2:
      c.batch_size = 64;
      c.lr = 1e-3;
      c.lr_policy = LrPolicy::kCosine;
      c.epochs = 8;
      break;
    case 3:
      c.batch_size = 8;
      c.text_mode = TextMode::kPositiveFindings;
      c.lr = 2e-3;
      c.lr_policy = LrPolicy::kPlateau;
      c.epochs = 15;
      break;
    case 4:
      c.batch_size = 8;
      c.text_mode = TextMode::kRawNarrative;
      c.lr = 5e-5;
      c.lr_policy = LrPolicy::kConstant;
      c.epochs = 6;
      c.lora_freeze_epoch = 0;
      break;
    default: throw ConfigError("phase_id must be in {1,2,3,4}");
  }
  return c;
}

inline json sampling_to_json(const SamplingConfig& s) {
  return {{"temperature", s.temperature}, {"top_p", s.top_p}, {"repetition_penalty", s.repetition_penalty},
          {"no_repeat_ngram", s.no_repeat_ngram}, {"max_new_tokens", s.max_new_tokens}, {"greedy", s.greedy}};
}

inline SamplingConfig sampling_from_json(const json& j, SamplingConfig s = {}) {
  const std::string scope = "sampling";
  detail::check_keys(j, {"temperature", "top_p", "repetition_penalty", "no_repeat_ngram", "max_new_tokens", "greedy"},
                     scope);
  detail::read(j, "temperature", s.temperature, scope);
  detail::read(j, "top_p", s.top_p, scope);
  detail::read(j, "repetition_penalty", s.repetition_penalty, scope);
  detail::read(j, "no_repeat_ngram", s.no_repeat_ngram, scope);
  detail::read(j, "max_new_tokens", s.max_new_tokens, scope);
  detail::read(j, "greedy", s.greedy, scope);
  return s;
}

inline json weights_to_json(const LossWeights& w) {
  return {{"cls", w.cls},       {"mil", w.mil},   {"orth", w.orth}, {"mmd", w.mmd},
          {"fcls", w.fcls},     {"jepa", w.jepa}, {"vcls", w.vcls}, {"ewc", w.ewc},
          {"focal_gamma", w.focal_gamma},         {"imq_gamma", w.imq_gamma}};
}

inline LossWeights weights_from_json(const json& j, LossWeights w = {}) {
  const std::string scope = "loss_weights";
  detail::check_keys(j, {"cls", "mil", "orth", "mmd", "fcls", "jepa", "vcls", "ewc", "focal_gamma", "imq_gamma"},
                     scope);
  detail::read(j, "cls", w.cls, scope);
  detail::read(j, "mil", w.mil, scope);
  detail::read(j, "orth", w.orth, scope);
  detail::read(j, "mmd", w.mmd, scope);
  detail::read(j, "fcls", w.fcls, scope);
  detail::read(j, "jepa", w.jepa, scope);
  detail::read(j, "vcls", w.vcls, scope);
  detail::read(j, "ewc", w.ewc, scope);
  detail::read(j, "focal_gamma", w.focal_gamma, scope);
  detail::read(j, "imq_gamma", w.imq_gamma, scope);
  return w;
}

inline json to_json(const PhaseConfig& c) {
  json j = {{"phase_id", c.phase_id},
            {"trainable_groups", c.trainable_groups},
            {"text_mode", to_string(c.text_mode)},
            {"loss_weights", weights_to_json(c.weights)},
            {"lr", c.lr},
            {"lr_policy", to_string(c.lr_policy)},
            {"plateau_patience", c.plateau_patience},
            {"plateau_factor", c.plateau_factor},
            {"epochs", c.epochs},
            {"early_stop_patience", c.early_stop_patience},
            {"batch_size", c.batch_size},
            {"samples_per_epoch", c.samples_per_epoch},
            {"lora_freeze_epoch", c.lora_freeze_epoch},
            {"projector_lr_scale_range", {c.projector_lr_scale_min, c.projector_lr_scale_max}},
            {"projector_lr_scaling", c.projector_lr_scaling},
            {"warm_bridge_source", c.warm_bridge_source ? json(*c.warm_bridge_source) : json(nullptr)},
            {"train_encoder", c.train_encoder},
            {"jepa_loss", c.jepa_loss == JepaLossKind::kMse ? "mse" : "cosine"},
            {"symmetric_nce", c.symmetric_nce},
            {"init_tau", c.init_tau},
            {"recalibrate_every", c.recalibrate_every},
            {"val_samples", c.val_samples},
            {"weight_decay", c.weight_decay},
            {"grad_clip", c.grad_clip},
            {"sampling", sampling_to_json(c.sampling)},
            {"seed", c.seed}};
  return j;
}

// Parses a phase config. Fields absent from `j` take the defaults of the
// phase named by "phase_id" (required).
inline PhaseConfig phase_config_from_json(const json& j) {
  const std::string scope = "phase config";
  detail::check_keys(j,
                     {"phase_id", "trainable_groups", "text_mode", "loss_weights", "lr", "lr_policy",
                      "plateau_patience", "plateau_factor", "epochs", "early_stop_patience", "batch_size",
                      "samples_per_epoch", "lora_freeze_epoch", "projector_lr_scale_range", "projector_lr_scaling",
                      "warm_bridge_source", "train_encoder", "jepa_loss", "symmetric_nce", "init_tau",
                      "recalibrate_every", "val_samples", "weight_decay", "grad_clip", "sampling", "seed"},
                     scope);
  if (!j.contains("phase_id")) throw ConfigError(scope + ": missing required key 'phase_id'");
  int phase = 0;
  detail::read(j, "phase_id", phase, scope);
  if (phase < 1 || phase > 4) throw ConfigError("phase_id must be in {1,2,3,4}");
  PhaseConfig c = default_phase_config(phase);
  detail::read(j, "train_encoder", c.train_encoder, scope);
  if (c.train_encoder) c.trainable_groups = default_trainable_groups(phase, true);
  detail::read(j, "trainable_groups", c.trainable_groups, scope);
  if (j.contains("text_mode")) {
    std::string s;
    detail::read(j, "text_mode", s, scope);
    c.text_mode = parse_text_mode(s);
  }
  if (j.contains("loss_weights")) c.weights = weights_from_json(j.at("loss_weights"), c.weights);
  detail::read(j, "lr", c.lr, scope);
  if (j.contains("lr_policy")) {
    std::string s;
    detail::read(j, "lr_policy", s, scope);
    c.lr_policy = parse_lr_policy(s);
  }
  detail::read(j, "plateau_patience", c.plateau_patience, scope);
  detail::read(j, "plateau_factor", c.plateau_factor, scope);
  detail::read(j, "epochs", c.epochs, scope);
  detail::read(j, "early_stop_patience", c.early_stop_patience, scope);
  detail::read(j, "batch_size", c.batch_size, scope);
  detail::read(j, "samples_per_epoch", c.samples_per_epoch, scope);
  detail::read(j, "lora_freeze_epoch", c.lora_freeze_epoch, scope);
  if (j.contains("projector_lr_scale_range")) {
    std::vector<double> r;
    detail::read(j, "projector_lr_scale_range", r, scope);
    if (r.size() != 2) throw ConfigError("projector_lr_scale_range must have two entries");
    c.projector_lr_scale_min = r[0];
    c.projector_lr_scale_max = r[1];
  }
  detail::read(j, "projector_lr_scaling", c.projector_lr_scaling, scope);
  if (j.contains("warm_bridge_source") && !j.at("warm_bridge_source").is_null()) {
    std::string s;
    detail::read(j, "warm_bridge_source", s, scope);
    c.warm_bridge_source = s;
  }
  if (j.contains("jepa_loss")) {
    std::string s;
    detail::read(j, "jepa_loss", s, scope);
    if (s == "mse") c.jepa_loss = JepaLossKind::kMse;
    else if (s == "cosine") c.jepa_loss = JepaLossKind::kCosine;
    else throw ConfigError("unknown jepa_loss '" + s + "'");
  }
  detail::read(j, "symmetric_nce", c.symmetric_nce, scope);
  detail::read(j, "init_tau", c.init_tau, scope);
  detail::read(j, "recalibrate_every", c.recalibrate_every, scope);
  detail::read(j, "val_samples", c.val_samples, scope);
  detail::read(j, "weight_decay", c.weight_decay, scope);
  detail::read(j, "grad_clip", c.grad_clip, scope);
  if (j.contains("sampling")) c.sampling = sampling_from_json(j.at("sampling"), c.sampling);
  detail::read(j, "seed", c.seed, scope);
  c.validate();
  return c;
}

inline json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  return parse_json_text({std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()}, path.string());
}

inline PhaseConfig load_phase_config(const std::filesystem::path& path) {
  return phase_config_from_json(read_json_file(path));
}

// Architecture of the full model.
struct ModelConfig {
  EncoderConfig encoder;
  BridgeConfig bridge;
  DecoderConfig decoder;
  std::size_t classes = 6;
  int text_layer = -1;  // block whose output feeds text embeddings; -1 = layers / 2

  std::size_t text_layer_index() const {
    return text_layer < 0 ? decoder.layers / 2 : static_cast<std::size_t>(text_layer);
  }

  void validate() const {
    if (encoder.d_v != bridge.d_v) throw ConfigError("model: encoder.d_v and bridge.d_v differ");
    if (bridge.d_llm != decoder.d_model) throw ConfigError("model: bridge.d_llm and decoder.d_model differ");
    if (encoder.d_v % encoder.heads != 0) throw ConfigError("model: encoder heads must divide d_v");
    if (classes == 0) throw ConfigError("model: classes must be >= 1");
    if (text_layer_index() >= decoder.layers) throw ConfigError("model: text_layer out of range");
    if (bridge.whitened_dim == 0 || bridge.whitened_dim > decoder.d_model) {
      throw ConfigError("model: whitened_dim must be in [1, d_model]");
    }
    decoder.validate();
  }

  // Laptop-scale preset used by the end-to-end benchmark.
  static ModelConfig bench() {
    ModelConfig m;
    m.encoder.d_v = 32;
    m.encoder.tokens = 8;
    m.encoder.heads = 4;
    m.encoder.ffn = 64;
    m.bridge.d_v = 32;
    m.bridge.d_llm = 32;
    m.bridge.head_hidden = 32;
    m.bridge.whitened_dim = 16;
    m.decoder.d_model = 32;
    m.decoder.ffn = 64;
    m.decoder.heads = 4;
    return m;
  }
};

inline json to_json(const ModelConfig& m) {
  return {{"encoder",
           {{"d_v", m.encoder.d_v}, {"tokens", m.encoder.tokens}, {"heads", m.encoder.heads},
            {"ffn", m.encoder.ffn}, {"max_slices", m.encoder.max_slices}, {"pe_base", m.encoder.pe_base}}},
          {"bridge",
           {{"head_hidden", m.bridge.head_hidden}, {"whitened_dim", m.bridge.whitened_dim},
            {"dropout", m.bridge.dropout}, {"init_scale", m.bridge.init_scale}}},
          {"decoder",
           {{"layers", m.decoder.layers}, {"d_model", m.decoder.d_model}, {"heads", m.decoder.heads},
            {"ffn", m.decoder.ffn}, {"vocab", m.decoder.vocab}, {"inject_layers", m.decoder.inject_layers},
            {"lora_rank", m.decoder.lora_rank}, {"lora_alpha", m.decoder.lora_alpha},
            {"rope_base", m.decoder.rope_base}, {"xattn_gain", m.decoder.xattn_gain},
            {"xattn_tanh_gate", m.decoder.xattn_tanh_gate}}},
          {"classes", m.classes},
          {"text_layer", m.text_layer}};
}

inline ModelConfig model_config_from_json(const json& j, ModelConfig m = {}) {
  detail::check_keys(j, {"encoder", "bridge", "decoder", "classes", "text_layer"}, "model");
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    detail::check_keys(e, {"d_v", "tokens", "heads", "ffn", "max_slices", "pe_base"}, "model.encoder");
    detail::read(e, "d_v", m.encoder.d_v, "model.encoder");
    detail::read(e, "tokens", m.encoder.tokens, "model.encoder");
    detail::read(e, "heads", m.encoder.heads, "model.encoder");
    detail::read(e, "ffn", m.encoder.ffn, "model.encoder");
    detail::read(e, "max_slices", m.encoder.max_slices, "model.encoder");
    detail::read(e, "pe_base", m.encoder.pe_base, "model.encoder");
  }
  if (j.contains("bridge")) {
    const auto& b = j.at("bridge");
    detail::check_keys(b, {"head_hidden", "whitened_dim", "dropout", "init_scale"}, "model.bridge");
    detail::read(b, "head_hidden", m.bridge.head_hidden, "model.bridge");
    detail::read(b, "whitened_dim", m.bridge.whitened_dim, "model.bridge");
    detail::read(b, "dropout", m.bridge.dropout, "model.bridge");
    detail::read(b, "init_scale", m.bridge.init_scale, "model.bridge");
  }
  if (j.contains("decoder")) {
    const auto& d = j.at("decoder");
    detail::check_keys(d,
                       {"layers", "d_model", "heads", "ffn", "vocab", "inject_layers", "lora_rank", "lora_alpha",
                        "rope_base", "xattn_gain", "xattn_tanh_gate"},
                       "model.decoder");
    detail::read(d, "layers", m.decoder.layers, "model.decoder");
    detail::read(d, "d_model", m.decoder.d_model, "model.decoder");
    detail::read(d, "heads", m.decoder.heads, "model.decoder");
    detail::read(d, "ffn", m.decoder.ffn, "model.decoder");
    detail::read(d, "vocab", m.decoder.vocab, "model.decoder");
    detail::read(d, "inject_layers", m.decoder.inject_layers, "model.decoder");
    detail::read(d, "lora_rank", m.decoder.lora_rank, "model.decoder");
    detail::read(d, "lora_alpha", m.decoder.lora_alpha, "model.decoder");
    detail::read(d, "rope_base", m.decoder.rope_base, "model.decoder");
    detail::read(d, "xattn_gain", m.decoder.xattn_gain, "model.decoder");
    detail::read(d, "xattn_tanh_gate", m.decoder.xattn_tanh_gate, "model.decoder");
  }
  detail::read(j, "classes", m.classes, "model");
  detail::read(j, "text_layer", m.text_layer, "model");
  m.bridge.d_v = m.encoder.d_v;
  m.bridge.d_llm = m.decoder.d_model;
  m.validate();
  return m;
}

}  // namespace glab
