// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glab/checkpoint.hpp"
#include "glab/config.hpp"
#include "glab/losses.hpp"
#include "glab/metrics.hpp"
#include "glab/model.hpp"
#include "glab/optim.hpp"
#include "glab/synthdata.hpp"

namespace glab {

// ---------------------------------------------------------------------------
// Freeze policy and bridge surgery.

inline const std::vector<std::string>& bridge_groups() {
  static const std::vector<std::string> g = {"projectors", "xattn", "lora"};
  return g;
}

// Freezes every group outside `phase.trainable_groups`. Base weights and the
// whitening transform stay frozen whatever the config says.
inline void apply_freeze_policy(ParameterStore& store, const PhaseConfig& phase) {
  std::set<std::string> train;
  for (const auto& g : phase.trainable_groups) {
    if (!is_known_group(g)) throw ConfigError("freeze policy: unknown group '" + g + "'");
    if (g != "base" && g != "whitening") train.insert(g);
  }
  for (const auto g : kParameterGroups) store.set_group_frozen(g, train.count(std::string(g)) == 0);
}

struct TransferReport {
  std::map<std::string, std::size_t> transferred;
  std::map<std::string, std::size_t> expected;  // target group cardinalities
  bool dry_run = false;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [_, v] : transferred) n += v;
    return n;
  }
  bool complete() const { return transferred == expected; }

  std::string summary() const {
    std::ostringstream os;
    os << "warm bridge" << (dry_run ? " (dry run)" : "") << ":";
    for (const auto& g : bridge_groups()) {
      os << ' ' << g << ' ' << (transferred.count(g) ? transferred.at(g) : 0) << '/'
         << (expected.count(g) ? expected.at(g) : 0);
    }
    os << ", total " << total();
    return os.str();
  }

  nlohmann::json to_json() const {
    return {{"transferred", transferred}, {"expected", expected}, {"total", total()}, {"dry_run", dry_run}};
  }
};

// Overwrites, by exact name, every projector, cross-attention and LoRA tensor
// of `target` with the source's copy. Missing names and shape mismatches
// abort before anything is written.
inline TransferReport warm_bridge_transfer(ParameterStore& target, const Checkpoint& source, bool dry_run = false) {
  TransferReport rep;
  rep.dry_run = dry_run;
  std::vector<std::string> missing, mismatched;
  std::vector<std::pair<std::string, const TensorRecord*>> plan;
  for (const auto& g : bridge_groups()) {
    const auto names = target.names_in_group(g);
    rep.expected[g] = names.size();
    rep.transferred[g] = 0;
    for (const auto& n : names) {
      const TensorRecord* r = source.find(n);
      if (!r) {
        missing.push_back(n);
        continue;
      }
      if (r->shape != target.get(n).shape()) {
        mismatched.push_back(n + " " + shape_str(r->shape) + " vs " + shape_str(target.get(n).shape()));
        continue;
      }
      plan.emplace_back(g, r);
    }
  }
  if (!missing.empty() || !mismatched.empty()) {
    std::ostringstream os;
    os << "warm bridge: ";
    if (!missing.empty()) {
      os << missing.size() << " tensor(s) missing from source:";
      for (const auto& n : missing) os << ' ' << n;
    }
    if (!mismatched.empty()) {
      os << (missing.empty() ? "" : "; ") << "shape mismatch:";
      for (const auto& n : mismatched) os << ' ' << n;
    }
    throw CheckpointError(os.str());
  }
  for (const auto& [g, r] : plan) {
    if (!dry_run) target.assign(r->name, r->data);
    ++rep.transferred[g];
  }
  return rep;
}

// Copies the tensors of the listed groups from `c`; all must be present.
inline void load_groups(ParameterStore& store, const Checkpoint& c, const std::vector<std::string>& groups) {
  for (const auto& g : groups) {
    for (const auto& n : store.names_in_group(g)) {
      const TensorRecord* r = c.find(n);
      if (!r) throw CheckpointError("load_groups: '" + n + "' missing from checkpoint");
      if (r->shape != store.get(n).shape()) throw CheckpointError("load_groups: shape mismatch for '" + n + "'");
      store.assign(n, r->data);
    }
  }
}

// ---------------------------------------------------------------------------
// Benchmark data.

struct EncodedText {
  std::vector<std::size_t> ids;  // words followed by [EOR]
  std::vector<bool> pathology;   // same length; [EOR] is generic
};

inline EncodedText encode_report(const Tokenizer& tok, const ReportText& r) {
  EncodedText e;
  e.ids = tok.tokenize(r.words);
  e.ids.push_back(tok.special().eor);
  e.pathology = r.pathology;
  e.pathology.push_back(false);
  return e;
}

struct Benchmark {
  Tokenizer tok;
  DatasetConfig data;
  uint64_t seed = 1;
  std::vector<ConditionSpec> conds;
  std::vector<SyntheticSample> train, val;

  static Benchmark generate(DatasetConfig cfg, std::size_t n_train, std::size_t n_val, uint64_t seed) {
    Benchmark b;
    b.data = cfg;
    b.seed = seed;
    b.conds = make_conditions(cfg);
    b.train = generate_dataset(cfg, n_train, seed, 0);
    b.val = generate_dataset(cfg, n_val, seed, n_train);
    return b;
  }

  std::vector<std::string> class_names() const {
    std::vector<std::string> n;
    for (const auto& c : conds) n.push_back(c.name);
    return n;
  }

  std::vector<std::size_t> positive_counts() const {
    std::vector<std::size_t> n(conds.size(), 0);
    for (const auto& s : train)
      for (std::size_t c = 0; c < n.size(); ++c) n[c] += s.labels.values[c];
    return n;
  }
};

enum class Split { kTrain, kVal };

// ---------------------------------------------------------------------------
// Training driver.

struct PretrainConfig {
  std::size_t lines = 4000;
  std::size_t epochs = 4;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  std::size_t min_sentences = 1, max_sentences = 4;
  uint64_t seed = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
  std::size_t steps = 0;
  double cls_f1 = std::numeric_limits<double>::quiet_NaN();
  double cls_auc = std::numeric_limits<double>::quiet_NaN();
  double val_nce = std::numeric_limits<double>::quiet_NaN();
  double gen_f1 = std::numeric_limits<double>::quiet_NaN();
  bool lora_frozen = false;

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"epoch", epoch},          {"train_loss", num(train_loss)}, {"lr", lr},
            {"seconds", seconds},      {"steps", steps},                {"cls_f1", num(cls_f1)},
            {"cls_auc", num(cls_auc)}, {"val_nce", num(val_nce)},       {"gen_f1", num(gen_f1)},
            {"lora_frozen", lora_frozen}};
  }
};

struct PhaseResult {
  int phase = 0;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch completed
  double best_metric = -std::numeric_limits<double>::infinity();
  Checkpoint best;
  Checkpoint last;  // state after the final completed epoch
  bool diverged = false;
  std::string divergence;
  std::optional<TransferReport> transfer;

  // Phase-selection metric of every epoch.
  std::vector<double> selection_curve() const {
    std::vector<double> v;
    for (const auto& e : history) v.push_back(phase >= 3 ? e.gen_f1 : e.cls_f1);
    return v;
  }

  nlohmann::json history_json() const {
    nlohmann::json h = nlohmann::json::array();
    for (const auto& e : history) h.push_back(e.to_json());
    return h;
  }
};

enum class TokenManipulation { kNormal, kZeroed, kRandom, kShuffled };

inline std::string to_string(TokenManipulation k) {
  switch (k) {
    case TokenManipulation::kNormal: return "normal";
    case TokenManipulation::kZeroed: return "zeroed";
    case TokenManipulation::kRandom: return "random";
    case TokenManipulation::kShuffled: return "shuffled";
  }
  return "normal";
}

inline TokenManipulation parse_manipulation(const std::string& s) {
  if (s == "normal") return TokenManipulation::kNormal;
  if (s == "zeroed") return TokenManipulation::kZeroed;
  if (s == "random") return TokenManipulation::kRandom;
  if (s == "shuffled") return TokenManipulation::kShuffled;
  throw ConfigError("unknown ablation kind '" + s + "'");
}

// Cyclic permutation of [0, n) drawn by Sattolo's algorithm; no fixed points.
inline std::vector<std::size_t> derangement(std::size_t n, uint64_t seed) {
  if (n < 2) throw ContractError("shuffled ablation needs at least 2 samples (no valid donor)");
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(splitmix64(seed ^ 0x5A77u));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(p[i], p[rng.index(i)]);
  return p;
}

using LogFn = std::function<void(const std::string&)>;

class Trainer {
 public:
  Trainer(GlabModel& model, const Benchmark& bench, LogFn log = {})
      : m_(model), b_(bench), log_(std::move(log)) {
    if (bench.conds.size() != model.classes()) throw ConfigError("trainer: class count differs from the model");
    if (bench.tok.size() > model.config().decoder.vocab) throw ConfigError("trainer: vocabulary exceeds decoder vocab");
    for (const auto* split : {&b_.train, &b_.val}) {
      auto& pos = split == &b_.train ? pos_train_ : pos_val_;
      auto& raw = split == &b_.train ? raw_train_ : raw_val_;
      for (const auto& s : *split) {
        pos.push_back(encode_report(b_.tok, s.report_positive));
        raw.push_back(encode_report(b_.tok, s.report_raw));
      }
    }
    const auto npos = b_.positive_counts();
    std::vector<std::size_t> nneg;
    for (std::size_t c : npos) nneg.push_back(b_.train.size() - c);
    pos_weights_ = positive_weights(npos, nneg);
  }

  GlabModel& model() { return m_; }
  const Benchmark& bench() const { return b_; }

  const EncodedText& report(Split s, std::size_t i, TextMode mode) const {
    const bool raw = mode == TextMode::kRawNarrative;
    return s == Split::kTrain ? (raw ? raw_train_ : pos_train_).at(i) : (raw ? raw_val_ : pos_val_).at(i);
  }

  // ---- Phase 0: generic language pretraining of the base decoder.

  std::vector<double> pretrain_base(const PretrainConfig& pc) {
    Rng rng(pc.seed);
    const auto corpus = generic_corpus(b_.tok, pc.lines, pc.min_sentences, pc.max_sentences, rng);
    for (const auto g : kParameterGroups) m_.store.set_group_frozen(g, g != "base");
    m_.decoder.set_lora_enabled(false);
    AdamW opt({pc.lr, 0.9, 0.999, 1e-8, 0.0, 1.0});
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> losses;
    for (std::size_t e = 0; e < pc.epochs; ++e) {
      rng.shuffle(order);
      const double lr = pc.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(e) /
                                                           static_cast<double>(pc.epochs)));
      double tot = 0.0;
      std::size_t n = 0;
      for (std::size_t s0 = 0; s0 < order.size(); s0 += pc.batch_size) {
        DecoderBatch batch;
        std::vector<std::size_t> targets;
        std::vector<bool> mask;
        for (std::size_t s = s0; s < std::min(order.size(), s0 + pc.batch_size); ++s) {
          const auto& ids = corpus[order[s]];
          batch.append(ids, std::vector<bool>(ids.size(), false), 0);
          for (std::size_t i = 0; i < ids.size(); ++i) {
            targets.push_back(i + 1 < ids.size() ? ids[i + 1] : 0);
            mask.push_back(i + 1 < ids.size());
          }
        }
        m_.store.zero_grad();
        const Tensor loss = lm_loss_masked(m_.decoder.forward(batch).logits, targets, mask);
        if (!std::isfinite(loss.item())) throw DivergenceError("base pretraining: non-finite loss");
        loss.backward();
        opt.step(m_.store, lr);
        tot += loss.item();
        ++n;
      }
      losses.push_back(tot / static_cast<double>(n));
      say("pretrain epoch " + std::to_string(e + 1) + " lm " + fmt(losses.back()));
    }
    m_.decoder.set_lora_enabled(true);
    m_.store.set_group_frozen("base", true);
    return losses;
  }

  // Measures the embedding-norm target, fits the whitening transform on
  // training report embeddings and seeds the predictor from their principal
  // axes.
  WhiteningTransform prepare_text_space() {
    m_.calibrator.set_target_norm(m_.decoder.embedding_norm());
    std::vector<std::vector<std::size_t>> seqs;
    for (std::size_t i = 0; i < b_.train.size(); ++i) {
      seqs.push_back(text_input(pos_train_[i]));
      seqs.push_back(text_input(raw_train_[i]));
    }
    const Tensor emb = m_.text_embeddings(seqs);
    const WhiteningTransform w = fit_whitening(emb, m_.config().bridge.whitened_dim);
    m_.set_whitening(w);
    m_.predictor.init_from_text_embeddings(emb);
    text_ready_ = false;
    say("whitening: D " + std::to_string(w.dim) + ", variance retained " + fmt(w.variance_retained) +
        ", target norm " + fmt(m_.calibrator.target_norm()));
    return w;
  }

  // Whitened positive-findings embedding of sample i (D values).
  const std::vector<double>& text_target(Split s, std::size_t i) {
    ensure_text_cache();
    return s == Split::kTrain ? zt_train_.at(i) : zt_val_.at(i);
  }

  // Whitened embedding of each condition's template sentence (C × D).
  const Tensor& condition_embeddings() {
    ensure_text_cache();
    return cond_emb_;
  }

  // Encoder output for a sample, cached while the encoder is unchanged.
  const Tensor& visual(Split s, std::size_t i) {
    auto& cache = s == Split::kTrain ? vcache_train_ : vcache_val_;
    const auto& data = s == Split::kTrain ? b_.train : b_.val;
    if (cache.size() != data.size()) cache.assign(data.size(), Tensor());
    if (!cache[i].defined()) {
      NoGradGuard ng;
      cache[i] = m_.visual_tokens(data[i].seq).detach();
    }
    return cache[i];
  }

  void invalidate_visual_cache() {
    vcache_train_.clear();
    vcache_val_.clear();
  }

  // Calibrated tokens of a sample in evaluation mode.
  Tensor eval_tokens(Split s, std::size_t i) {
    NoGradGuard ng;
    return m_.calibrated(visual(s, i)).detach();
  }

  // Resets α from the mean predictor-output norm over up to n training samples.
  double recalibrate(std::size_t n = 128) {
    NoGradGuard ng;
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < std::min(n, b_.train.size()); ++i)
      rows.push_back(m_.predictor.forward(visual(Split::kTrain, i), false));
    return m_.calibrator.recalibrate(concat_rows(rows));
  }

  // ---- Evaluation.

  struct ClassScores {
    std::vector<std::vector<double>> scores;
    std::vector<LabelVector> labels;
  };

  ClassScores classification_scores(Split s) {
    NoGradGuard ng;
    const auto& data = s == Split::kTrain ? b_.train : b_.val;
    ClassScores out;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Tensor z = m_.cls_logits(visual(s, i));
      std::vector<double> p;
      for (double v : z.data()) p.push_back(1.0 / (1.0 + std::exp(-v)));
      out.scores.push_back(std::move(p));
      out.labels.push_back(data[i].labels);
    }
    return out;
  }

  MetricReport classification_report(Split s) {
    const ClassScores cs = classification_scores(s);
    return score_metrics(cs.scores, cs.labels, std::vector<double>(m_.classes(), 0.5), b_.class_names());
  }

  struct Generation {
    std::vector<std::vector<std::size_t>> outputs;
    std::vector<LabelVector> predicted, labels;
    MetricReport report;
  };

  // Generates reports for the first n samples of a split under a token
  // manipulation and scores the oracle-extracted labels.
  Generation generation(Split s, std::size_t n, const SamplingConfig& sc, uint64_t seed,
                        TokenManipulation kind = TokenManipulation::kNormal) {
    const auto& data = s == Split::kTrain ? b_.train : b_.val;
    n = std::min(n, data.size());
    std::vector<Tensor> toks;
    for (std::size_t i = 0; i < n; ++i) toks.push_back(eval_tokens(s, i));
    toks = manipulate(toks, kind, seed);
    Generation g;
    for (std::size_t i = 0; i < n; ++i) {
      SamplingConfig c = sc;
      c.seed = splitmix64(seed * 0x100000001B3ULL + data[i].index);
      g.outputs.push_back(m_.decoder.generate(m_.prompt(toks[i]), c));
      g.predicted.push_back(label_extractor_oracle(b_.tok.report_words(g.outputs.back()), b_.conds));
      g.labels.push_back(data[i].labels);
    }
    g.report = macro_metrics(g.predicted, g.labels, b_.class_names());
    return g;
  }

  std::vector<Tensor> manipulate(std::vector<Tensor> toks, TokenManipulation kind, uint64_t seed) const {
    switch (kind) {
      case TokenManipulation::kNormal: break;
      case TokenManipulation::kZeroed:
        for (auto& t : toks) t = Tensor::zeros(t.shape());
        break;
      case TokenManipulation::kRandom: {
        Rng rng(splitmix64(seed ^ 0xA11CEu));
        const double target = m_.calibrator.target_norm();
        for (auto& t : toks) {
          std::vector<double> v(t.numel());
          const std::size_t d = t.cols();
          for (std::size_t r = 0; r < t.rows(); ++r) {
            double nrm = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              v[r * d + j] = rng.normal();
              nrm += v[r * d + j] * v[r * d + j];
            }
            nrm = std::sqrt(nrm);
            for (std::size_t j = 0; j < d; ++j) v[r * d + j] *= target / nrm;
          }
          t = Tensor::from(t.shape(), std::move(v));
        }
        break;
      }
      case TokenManipulation::kShuffled: {
        const auto p = derangement(toks.size(), seed);
        std::vector<Tensor> out(toks.size());
        for (std::size_t i = 0; i < toks.size(); ++i) out[i] = toks[p[i]];
        toks = std::move(out);
        break;
      }
    }
    return toks;
  }

  // ---- Phases 1–4.

  PhaseResult run_phase(const PhaseConfig& pc, const Checkpoint* warm_source = nullptr) {
    pc.validate();
    PhaseResult res;
    res.phase = pc.phase_id;
    if (pc.phase_id >= 2 && !m_.whitening_fitted()) {
      throw ContractError("phase " + std::to_string(pc.phase_id) + " needs the whitening transform (run base pretraining)");
    }
    if (warm_source) {
      res.transfer = warm_bridge_transfer(m_.store, *warm_source);
      say(res.transfer->summary());
    }
    apply_freeze_policy(m_.store, pc);
    const bool encoder_trains = !m_.store.entry(m_.store.names_in_group("encoder").front()).frozen;
    if (encoder_trains) invalidate_visual_cache();
    const bool calibrator_trains = !m_.store.entry("calibrator.alpha").frozen;
    if (pc.phase_id >= 2 && calibrator_trains) {
      const double a = recalibrate();
      say("recalibrated alpha " + fmt(a));
    }
    std::map<std::string, std::vector<double>> ewc_refs;
    if (pc.phase_id == 4 && pc.weights.ewc > 0.0) ewc_refs = snapshot_group(m_.store, "lora");

    AdamW opt({pc.lr, 0.9, 0.999, 1e-8, pc.weight_decay, pc.grad_clip});
    LrSchedule sched(pc.lr_policy, pc.lr, pc.epochs, pc.plateau_patience, pc.plateau_factor);
    Rng rng(splitmix64(pc.seed * 31 + static_cast<uint64_t>(pc.phase_id)));
    const std::size_t n = b_.train.size();
    const std::size_t per_epoch = pc.samples_per_epoch ? std::min(pc.samples_per_epoch, n) : n;
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    std::size_t cursor = n;

    Checkpoint last_good = m_.checkpoint();
    double best_sel = -std::numeric_limits<double>::infinity(), best_tie = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    uint64_t step = 0;
    bool lora_frozen = false;

    for (std::size_t e = 1; e <= pc.epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      const double lr = sched.at_epoch(e - 1);
      std::vector<std::size_t> shard;
      while (shard.size() < per_epoch) {
        if (cursor == n) {
          rng.shuffle(pool);
          cursor = 0;
        }
        shard.push_back(pool[cursor++]);
      }
      EpochRecord rec;
      rec.epoch = e;
      rec.lr = lr;
      double tot = 0.0;
      std::size_t batches = 0;
      for (std::size_t s0 = 0; s0 < shard.size(); s0 += pc.batch_size) {
        const std::vector<std::size_t> idx(shard.begin() + static_cast<std::ptrdiff_t>(s0),
                                           shard.begin() + static_cast<std::ptrdiff_t>(std::min(shard.size(), s0 + pc.batch_size)));
        m_.store.zero_grad();
        const Tensor loss = batch_loss(pc, idx, e, step, ewc_refs);
        const double lv = loss.item();
        if (!std::isfinite(lv)) {
          res.diverged = true;
          res.divergence = "non-finite loss at epoch " + std::to_string(e) + ", step " + std::to_string(step);
          break;
        }
        loss.backward();
        if (pc.projector_lr_scaling && !m_.store.entry(m_.store.names_in_group("projectors").front()).frozen) {
          opt.set_group_scale("projectors", projector_scale(pc));
        }
        opt.step(m_.store, lr);
        if (m_.store.contains("heads.nce.log_tau")) clamp_log_tau(m_.log_tau);
        ++step;
        if (encoder_trains) invalidate_visual_cache();
        if (pc.recalibrate_every && calibrator_trains && pc.phase_id >= 2 && step % pc.recalibrate_every == 0) {
          recalibrate();
        }
        tot += lv;
        ++batches;
      }
      if (res.diverged) {
        say("phase " + std::to_string(pc.phase_id) + " diverged: " + res.divergence);
        break;
      }
      rec.steps = batches;
      rec.train_loss = batches ? tot / static_cast<double>(batches) : 0.0;
      if (pc.phase_id == 3 && pc.lora_freeze_epoch && e == pc.lora_freeze_epoch) {
        m_.store.set_group_frozen("lora", true);
        lora_frozen = true;
      }
      rec.lora_frozen = lora_frozen;

      double sel = 0.0, tie = 0.0;
      if (pc.phase_id <= 2) {
        const MetricReport r = classification_report(Split::kVal);
        rec.cls_f1 = r.macro_f1;
        rec.cls_auc = r.macro_auc;
        sel = r.macro_f1;
        if (pc.phase_id == 2) {
          rec.val_nce = validation_nce(pc);
          tie = rec.val_nce;
        }
      } else {
        rec.gen_f1 = generation(Split::kVal, pc.val_samples, pc.sampling, pc.seed).report.macro_f1;
        sel = rec.gen_f1;
      }
      sched.observe(sel);
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.history.push_back(rec);
      say(epoch_line(pc.phase_id, rec));

      const bool better = sel > best_sel + 1e-12 || (std::abs(sel - best_sel) <= 1e-12 && tie < best_tie);
      if (better) {
        best_sel = sel;
        best_tie = tie;
        res.best_epoch = e;
        res.best_metric = sel;
        res.best = m_.checkpoint(&opt);
        since_best = 0;
      } else {
        ++since_best;
      }
      if (res.best_epoch) last_good = res.best;
      if (pc.early_stop_patience && since_best >= pc.early_stop_patience) {
        say("early stop after epoch " + std::to_string(e));
        break;
      }
    }
    if (res.best_epoch == 0) res.best = last_good;
    if (!res.history.empty()) res.last = m_.checkpoint(&opt);
    restore_checkpoint(res.best, m_.store);
    apply_freeze_policy(m_.store, pc);
    if (encoder_trains) invalidate_visual_cache();
    res.best.metadata["phase"] = pc.phase_id;
    res.best.metadata["best_epoch"] = res.best_epoch;
    res.best.metadata["history"] = res.history_json();
    res.best.metadata["phase_config"] = to_json(pc);
    if (res.transfer) res.best.metadata["transfer"] = res.transfer->to_json();
    return res;
  }

 private:
  static std::string fmt(double v) {
    std::ostringstream os;
    os.precision(4);
    os << std::fixed << v;
    return os.str();
  }

  void say(const std::string& s) const {
    if (log_) log_(s);
  }

  static std::string epoch_line(int phase, const EpochRecord& r) {
    std::ostringstream os;
    os.precision(4);
    os << std::fixed << "phase " << phase << " epoch " << r.epoch << " loss " << r.train_loss << " lr " << r.lr;
    if (std::isfinite(r.cls_f1)) os << " cls_f1 " << r.cls_f1;
    if (std::isfinite(r.cls_auc)) os << " auc " << r.cls_auc;
    if (std::isfinite(r.val_nce)) os << " val_nce " << r.val_nce;
    if (std::isfinite(r.gen_f1)) os << " gen_f1 " << r.gen_f1;
    if (r.lora_frozen) os << " [lora frozen]";
    os << " (" << std::setprecision(1) << r.seconds << " s)";
    return os.str();
  }

  std::vector<std::size_t> text_input(const EncodedText& t) const {
    std::vector<std::size_t> ids{b_.tok.special().bos};
    ids.insert(ids.end(), t.ids.begin(), t.ids.end() - 1);
    return ids;
  }

  void ensure_text_cache() {
    if (text_ready_) return;
    if (!m_.whitening_fitted()) throw ContractError("text targets need a fitted whitening transform");
    const WhiteningTransform w = m_.whitening();
    auto whiten_all = [&](const std::vector<EncodedText>& texts) {
      std::vector<std::vector<std::size_t>> seqs;
      for (const auto& t : texts) seqs.push_back(text_input(t));
      const Tensor emb = m_.text_embeddings(seqs);
      std::vector<std::vector<double>> out;
      const std::size_t d = emb.cols();
      for (std::size_t i = 0; i < emb.rows(); ++i) out.push_back(w.apply(emb.data().subspan(i * d, d)));
      return out;
    };
    zt_train_ = whiten_all(pos_train_);
    zt_val_ = whiten_all(pos_val_);
    std::vector<EncodedText> cond_text;
    for (const auto& c : b_.conds) {
      ReportText r;
      r.words = c.template_positive;
      r.pathology.assign(r.words.size(), true);
      cond_text.push_back(encode_report(b_.tok, r));
    }
    const auto ce = whiten_all(cond_text);
    std::vector<double> flat;
    for (const auto& row : ce) flat.insert(flat.end(), row.begin(), row.end());
    cond_emb_ = Tensor::from({ce.size(), w.dim}, std::move(flat));
    text_ready_ = true;
  }

  Tensor positive_condition_rows(const LabelVector& y) {
    std::vector<std::size_t> rows;
    for (std::size_t c = 0; c < y.size(); ++c)
      if (y.values[c]) rows.push_back(c);
    return gather_rows(condition_embeddings(), rows);
  }

  static Tensor mean_of(const std::vector<Tensor>& terms) {
    Tensor s = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) s = add(s, terms[i]);
    return scale(s, 1.0 / static_cast<double>(terms.size()));
  }

  double projector_scale(const PhaseConfig& pc) const {
    double g = 0.0, w = 0.0;
    for (const auto& n : m_.store.names_in_group("projectors")) {
      const Tensor& t = m_.store.get(n);
      for (double v : t.data()) w += v * v;
      if (t.has_grad())
        for (double v : t.grad()) g += v * v;
    }
    return projector_lr_scale(std::sqrt(g), std::sqrt(w), pc.projector_lr_scale_min, pc.projector_lr_scale_max);
  }

  Tensor batch_loss(const PhaseConfig& pc, const std::vector<std::size_t>& idx, std::size_t epoch, uint64_t step,
                    const std::map<std::string, std::vector<double>>& ewc_refs) {
    switch (pc.phase_id) {
      case 1: return phase1_loss(pc, idx);
      case 2: return phase2_loss(pc, idx, step);
      default: return generative_loss(pc, idx, epoch, step, ewc_refs);
    }
  }

  Tensor phase1_loss(const PhaseConfig& pc, const std::vector<std::size_t>& idx) {
    std::vector<Tensor> bce_t, mil_t, orth_t, mmd_t;
    for (std::size_t i : idx) {
      const auto& s = b_.train[i];
      const Tensor v = m_.visual_tokens(s.seq);
      bce_t.push_back(bce_pos_weighted(m_.cls_logits(v), s.labels, pos_weights_));
      mil_t.push_back(mil_loss(m_.token_logits(v), s.labels, pos_weights_));
      if (v.rows() >= 2) orth_t.push_back(orthogonality_loss(v));
      if (s.labels.positives() > 0 && pc.weights.mmd > 0.0) {
        mmd_t.push_back(mmd_imq(m_.mmd_rows(v), positive_condition_rows(s.labels), pc.weights.imq_gamma));
      }
    }
    LossParts p;
    p.bce = mean_of(bce_t);
    p.mil = mean_of(mil_t);
    if (!orth_t.empty()) p.orth = mean_of(orth_t);
    if (!mmd_t.empty()) p.mmd = mean_of(mmd_t);
    return compose_phase_loss(PhaseEquation::kPhase1, pc.weights, p);
  }

  Tensor phase2_loss(const PhaseConfig& pc, const std::vector<std::size_t>& idx, uint64_t step) {
    const bool enc = !m_.store.entry(m_.store.names_in_group("encoder").front()).frozen;
    std::vector<Tensor> zv, mmd_t;
    std::vector<double> zt;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto& s = b_.train[idx[j]];
      const Tensor v = enc ? m_.visual_tokens(s.seq) : visual(Split::kTrain, idx[j]);
      const Tensor vt = m_.calibrated(v, true, pc.seed, step * 4096 + j);
      zv.push_back(m_.embed_head.forward(vt));
      const auto& t = text_target(Split::kTrain, idx[j]);
      zt.insert(zt.end(), t.begin(), t.end());
      if (s.labels.positives() > 0 && pc.weights.mmd > 0.0) {
        mmd_t.push_back(mmd_imq(m_.embed_head.project_rows(vt), positive_condition_rows(s.labels),
                                pc.weights.imq_gamma));
      }
    }
    LossParts p;
    p.nce = info_nce(concat_rows(zv), Tensor::from({idx.size(), m_.config().bridge.whitened_dim}, std::move(zt)),
                     m_.log_tau, pc.symmetric_nce);
    if (!mmd_t.empty()) p.mmd = mean_of(mmd_t);
    return compose_phase_loss(PhaseEquation::kPhase2, pc.weights, p);
  }

  double validation_nce(const PhaseConfig& pc) {
    NoGradGuard ng;
    double tot = 0.0;
    std::size_t nb = 0;
    const std::size_t bs = std::max<std::size_t>(pc.batch_size, 2);
    for (std::size_t s0 = 0; s0 + 2 <= b_.val.size(); s0 += bs) {
      const std::size_t s1 = std::min(b_.val.size(), s0 + bs);
      std::vector<Tensor> zv;
      std::vector<double> zt;
      for (std::size_t i = s0; i < s1; ++i) {
        zv.push_back(m_.embed_head.forward(m_.calibrated(visual(Split::kVal, i))));
        const auto& t = text_target(Split::kVal, i);
        zt.insert(zt.end(), t.begin(), t.end());
      }
      tot += info_nce(concat_rows(zv), Tensor::from({s1 - s0, m_.config().bridge.whitened_dim}, std::move(zt)),
                      m_.log_tau, pc.symmetric_nce)
                 .item();
      ++nb;
    }
    return nb ? tot / static_cast<double>(nb) : 0.0;
  }

  // Target text of a training visit. Positive-findings order is redrawn on
  // every visit.
  EncodedText training_text(const PhaseConfig& pc, std::size_t i, std::size_t epoch) const {
    const auto& s = b_.train[i];
    if (pc.text_mode == TextMode::kRawNarrative) return raw_train_[i];
    Rng rng(splitmix64(pc.seed * 0x9E37u + epoch * 0x10001u + s.index));
    return encode_report(b_.tok, build_positive_findings_text(s.labels, b_.conds, rng));
  }

  Tensor generative_loss(const PhaseConfig& pc, const std::vector<std::size_t>& idx, std::size_t epoch,
                         uint64_t step, const std::map<std::string, std::vector<double>>& ewc_refs) {
    DecoderBatch batch;
    std::vector<std::size_t> targets;
    std::vector<bool> respond;
    std::vector<Tensor> vis, vts;
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    std::vector<std::vector<bool>> ph_masks;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const Tensor& v = visual(Split::kTrain, idx[j]);
      const Tensor vt = m_.calibrated(v, true, pc.seed, step * 4096 + j);
      vis.push_back(v);
      vts.push_back(vt);
      const GraftedPrompt p = m_.prompt(vt);
      const EncodedText t = training_text(pc, idx[j], epoch);
      std::vector<std::size_t> ids = p.token_ids;
      ids.insert(ids.end(), t.ids.begin(), t.ids.end() - 1);
      std::vector<bool> mask = p.placeholder_mask;
      mask.resize(ids.size(), false);
      const std::size_t start = batch.tokens.size();
      batch.append(ids, mask, vt.rows());
      spans.emplace_back(start, batch.tokens.size());
      ph_masks.push_back(mask);
      const std::size_t np = p.token_ids.size();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const bool r = i + 1 >= np;
        respond.push_back(r);
        targets.push_back(r ? t.ids[i + 1 - np] : 0);
      }
    }
    batch.visual = concat_rows(vts);
    const DecoderOutput out = m_.decoder.forward(batch);
    LossParts p;
    p.lm = lm_loss_masked(out.logits, targets, respond);
    const double g = pc.weights.focal_gamma;
    std::vector<Tensor> vcls_t, focal_t, jepa_t;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto& y = b_.train[idx[j]].labels;
      const bool want_vcls = pc.phase_id == 3 ? pc.weights.vcls > 0.0 : pc.weights.cls > 0.0;
      if (want_vcls) {
        vcls_t.push_back(llm_visual_cls_loss(slice_rows(out.last_hidden, spans[j].first, spans[j].second),
                                             ph_masks[j], m_.vcls_w, m_.vcls_b, y, g));
      }
      if (pc.phase_id == 3) {
        if (pc.weights.fcls > 0.0) focal_t.push_back(focal_loss(m_.cls_logits(vis[j]), y, g));
        if (pc.weights.jepa > 0.0) {
          const auto& zt = text_target(Split::kTrain, idx[j]);
          jepa_t.push_back(jepa_embed_loss(m_.embed_head.forward(vts[j]), Tensor::from({1, zt.size()}, zt),
                                           pc.jepa_loss));
        }
      }
    }
    if (pc.phase_id == 3) {
      if (!vcls_t.empty()) p.vcls = mean_of(vcls_t);
      if (!focal_t.empty()) p.focal = mean_of(focal_t);
      if (!jepa_t.empty()) p.jepa = mean_of(jepa_t);
      return compose_phase_loss(PhaseEquation::kPhase3, pc.weights, p);
    }
    if (!vcls_t.empty()) p.focal = mean_of(vcls_t);
    if (!ewc_refs.empty()) p.ewc = ewc_penalty(m_.store, ewc_refs, pc.weights.ewc);
    return compose_phase_loss(PhaseEquation::kPhase4, pc.weights, p);
  }

  GlabModel& m_;
  const Benchmark& b_;
  LogFn log_;
  std::vector<EncodedText> pos_train_, pos_val_, raw_train_, raw_val_;
  std::vector<double> pos_weights_;
  std::vector<Tensor> vcache_train_, vcache_val_;
  std::vector<std::vector<double>> zt_train_, zt_val_;
  Tensor cond_emb_;
  bool text_ready_ = false;
};

}  // namespace glab
