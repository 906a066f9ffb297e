// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glab/core/binary_io.hpp"
#include "glab/core/random.hpp"
#include "glab/decoder.hpp"
#include "glab/encoder.hpp"
#include "glab/losses.hpp"

namespace glab {

using Words = std::vector<std::string>;

inline Words split_words(const std::string& text) {
  Words out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    if (w.size() > 1 && w.back() == '.') {
      out.push_back(w.substr(0, w.size() - 1));
      out.emplace_back(".");
    } else {
      out.push_back(w);
    }
  }
  return out;
}

// Joins words with single spaces; a period attaches to the preceding word.
inline std::string join_words(const Words& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty() && w != ".") s += ' ';
    s += w;
  }
  return s;
}

// One abnormality class of the synthetic benchmark.
struct ConditionSpec {
  std::size_t class_id = 0;
  std::string name;
  std::vector<double> signature;  // unit direction in slice space
  std::size_t zone_lo = 0, zone_hi = 1;  // planted zone drawn from [zone_lo, zone_hi)
  double strength = 3.0;
  Words template_positive;
  std::vector<std::string> keywords;
  double prevalence = 0.25;
};

namespace detail {

struct ConditionText {
  const char* name;
  const char* sentence;
  const char* keyword;
  double zone_begin, zone_end;  // fractions of K
};

// Each sentence opens with its class keyword; no keyword appears elsewhere.
inline const std::vector<ConditionText>& condition_table() {
  static const std::vector<ConditionText> t = {
      {"pleural_effusion", "Pleural effusion is present at the right lung base.", "Pleural", 0.625, 1.0},
      {"cardiomegaly", "Cardiomegaly is noted with an enlarged cardiac silhouette.", "Cardiomegaly", 0.375, 0.75},
      {"lung_nodule", "Nodule measuring several millimetres is seen in the left upper lobe.", "Nodule", 0.0, 1.0},
      {"emphysema", "Emphysema with centrilobular lucencies is present in both upper lobes.", "Emphysema", 0.0, 0.375},
      {"consolidation", "Consolidation is observed in the lower lobe segments.", "Consolidation", 0.5, 1.0},
      {"atelectasis", "Atelectasis is seen as linear bands at the lung bases.", "Atelectasis", 0.625, 1.0},
      {"pericardial_effusion", "Pericardial fluid is present around the heart.", "Pericardial", 0.375, 0.75},
      {"arterial_wall_calcification", "Calcified plaques are seen along the arterial walls.", "Calcified", 0.25, 0.75},
      {"coronary_calcification", "Coronary calcification is visible along the anterior descending artery.", "Coronary", 0.375, 0.625},
      {"hiatal_hernia", "Hernia of hiatal type is seen at the gastroesophageal junction.", "Hernia", 0.75, 1.0},
      {"lymphadenopathy", "Lymphadenopathy is present with enlarged mediastinal nodes.", "Lymphadenopathy", 0.25, 0.625},
      {"medical_material", "Catheter material is seen in the superior vena cava.", "Catheter", 0.125, 0.5},
      {"lung_opacity", "Opacity with ground glass appearance is seen in the lungs.", "Opacity", 0.0, 1.0},
      {"pulmonary_fibrotic_sequela", "Fibrotic sequelae are seen as reticular bands in the periphery.", "Fibrotic", 0.0, 1.0},
      {"mosaic_attenuation", "Mosaic attenuation pattern is observed in both lungs.", "Mosaic", 0.125, 0.875},
      {"peribronchial_thickening", "Peribronchial thickening is noted in the lower lobes.", "Peribronchial", 0.5, 1.0},
      {"bronchiectasis", "Bronchiectasis with dilated airways is seen in the lower lobes.", "Bronchiectasis", 0.5, 1.0},
      {"interlobular_septal_thickening", "Interlobular septal thickening is present in the periphery.", "Interlobular", 0.0, 1.0},
  };
  return t;
}

}  // namespace detail

inline constexpr std::size_t kMaxConditions = 18;

inline const std::string& normal_sentence() {
  static const std::string s = "No significant thoracic abnormalities identified.";
  return s;
}

// Fixed normal-anatomy sentences of the raw narrative, in report order.
inline const std::vector<std::string>& boilerplate_sentences() {
  static const std::vector<std::string> b = {
      "Trachea and both main bronchi are open.",
      "Mediastinal structures are within normal limits.",
      "Heart contour appears unremarkable.",
      "Thoracic aorta has normal diameter.",
      "No pneumothorax is detected.",
      "Both lungs are well aerated.",
      "Visualized bones show no lytic lesion.",
      "Upper abdominal organs are grossly normal.",
  };
  return b;
}

// Closed word-level vocabulary; ids below kFirstWordId are special tokens.
class Tokenizer {
 public:
  static constexpr std::size_t kFirstWordId = 7;

  Tokenizer() {
    for (const char* s : {"[PAD]", "[BOS]", "[SYS]", "[VIS]", "[USR]", "[ASST]", "[EOR]"}) add(s);
    auto add_sentence = [&](const std::string& s) {
      for (const auto& w : split_words(s)) add(w);
    };
    for (const auto& c : detail::condition_table()) add_sentence(c.sentence);
    add_sentence(normal_sentence());
    for (const auto& b : boilerplate_sentences()) add_sentence(b);
  }

  std::size_t size() const { return words_.size(); }
  const SpecialTokens& special() const { return special_; }

  std::size_t id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw ContractError("tokenizer: out-of-vocabulary word '" + w + "'");
    return it->second;
  }
  bool contains(const std::string& w) const { return index_.count(w) != 0; }
  const std::string& word(std::size_t id) const {
    if (id >= words_.size()) throw ContractError("tokenizer: id " + std::to_string(id) + " out of range");
    return words_[id];
  }

  std::vector<std::size_t> tokenize(const Words& words) const {
    std::vector<std::size_t> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }
  Words detokenize(const std::vector<std::size_t>& ids) const {
    Words out;
    out.reserve(ids.size());
    for (std::size_t i : ids) out.push_back(word(i));
    return out;
  }
  // Words of `ids` up to the first [EOR], skipping other specials.
  Words report_words(const std::vector<std::size_t>& ids) const {
    Words out;
    for (std::size_t i : ids) {
      if (i == special_.eor) break;
      if (i >= kFirstWordId && i < words_.size()) out.push_back(words_[i]);
    }
    return out;
  }

 private:
  void add(const std::string& w) {
    if (index_.count(w)) return;
    index_[w] = words_.size();
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::map<std::string, std::size_t> index_;
  SpecialTokens special_;
};

struct DatasetConfig {
  std::size_t classes = 6;
  std::size_t n_min = 40, n_max = 120;
  std::size_t d_v = 64;
  std::size_t zones = 8;  // K of the encoder the signatures are planted for
  double normal_fraction = 0.38;
  double prevalence = 0.25;
  double strength = 3.0;
  double noise = 1.0;
  double invalid_fraction = 0.05;
  uint64_t world_seed = 1;

  void validate() const {
    if (classes == 0 || classes > kMaxConditions) throw ConfigError("dataset: classes must be in [1, 18]");
    if (n_min == 0 || n_min > n_max) throw ConfigError("dataset: invalid slice-count range");
    if (zones == 0 || n_min < zones) throw ConfigError("dataset: n_min must be >= zones");
    if (normal_fraction < 0.0 || normal_fraction > 1.0) throw ConfigError("dataset: normal_fraction out of [0,1]");
  }
};

// Conditions of a benchmark world; signatures are shared by every split.
inline std::vector<ConditionSpec> make_conditions(const DatasetConfig& cfg) {
  cfg.validate();
  Rng rng(splitmix64(cfg.world_seed ^ 0x5157u));
  std::vector<ConditionSpec> out;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    const auto& t = detail::condition_table()[c];
    ConditionSpec s;
    s.class_id = c;
    s.name = t.name;
    s.signature.resize(cfg.d_v);
    double nrm = 0.0;
    for (auto& v : s.signature) {
      v = rng.normal();
      nrm += v * v;
    }
    for (auto& v : s.signature) v /= std::sqrt(nrm);
    const auto k = static_cast<double>(cfg.zones);
    s.zone_lo = std::min(cfg.zones - 1, static_cast<std::size_t>(std::floor(t.zone_begin * k)));
    s.zone_hi = std::max(s.zone_lo + 1, static_cast<std::size_t>(std::floor(t.zone_end * k)));
    s.strength = cfg.strength;
    s.template_positive = split_words(t.sentence);
    s.keywords = {t.keyword};
    s.prevalence = cfg.prevalence;
    out.push_back(std::move(s));
  }
  return out;
}

// Class c positive iff one of its keywords occurs with no "no"/"without"
// among the three preceding words.
inline LabelVector label_extractor_oracle(const Words& report, const std::vector<ConditionSpec>& conds) {
  LabelVector y;
  y.values.assign(conds.size(), false);
  auto negation = [](const std::string& w) { return w == "no" || w == "No" || w == "without" || w == "Without"; };
  for (std::size_t i = 0; i < report.size(); ++i) {
    for (const auto& c : conds) {
      if (std::find(c.keywords.begin(), c.keywords.end(), report[i]) == c.keywords.end()) continue;
      bool negated = false;
      for (std::size_t b = 1; b <= 3 && b <= i; ++b) negated = negated || negation(report[i - b]);
      if (!negated) y.values[c.class_id] = true;
    }
  }
  return y;
}

// Positive templates in random order, or the normal sentence when no class
// is positive. The mask flags template words.
struct ReportText {
  Words words;
  std::vector<bool> pathology;
};

inline ReportText build_positive_findings_text(const LabelVector& labels, const std::vector<ConditionSpec>& conds,
                                               Rng& rng) {
  if (labels.size() != conds.size()) throw ShapeError("positive-findings text: label/template count mismatch");
  std::vector<std::size_t> pos;
  for (std::size_t c = 0; c < labels.size(); ++c)
    if (labels.values[c]) pos.push_back(c);
  ReportText r;
  if (pos.empty()) {
    r.words = split_words(normal_sentence());
    r.pathology.assign(r.words.size(), false);
    return r;
  }
  rng.shuffle(pos);
  for (std::size_t c : pos) {
    const auto& t = conds[c].template_positive;
    r.words.insert(r.words.end(), t.begin(), t.end());
    r.pathology.insert(r.pathology.end(), t.size(), true);
  }
  return r;
}

// Boilerplate in fixed order with each positive sentence inserted at an
// independently drawn sentence boundary.
inline ReportText build_raw_narrative_text(const LabelVector& labels, const std::vector<ConditionSpec>& conds,
                                           Rng& rng) {
  const auto& bp = boilerplate_sentences();
  std::vector<std::vector<std::size_t>> slots(bp.size() + 1);
  std::vector<std::size_t> pos;
  for (std::size_t c = 0; c < labels.size(); ++c)
    if (labels.values[c]) pos.push_back(c);
  rng.shuffle(pos);
  for (std::size_t c : pos) slots[rng.index(slots.size())].push_back(c);
  ReportText r;
  for (std::size_t s = 0; s < slots.size(); ++s) {
    for (std::size_t c : slots[s]) {
      const auto& t = conds[c].template_positive;
      r.words.insert(r.words.end(), t.begin(), t.end());
      r.pathology.insert(r.pathology.end(), t.size(), true);
    }
    if (s < bp.size()) {
      const Words w = split_words(bp[s]);
      r.words.insert(r.words.end(), w.begin(), w.end());
      r.pathology.insert(r.pathology.end(), w.size(), false);
    }
  }
  return r;
}

struct SyntheticSample {
  std::size_t index = 0;
  SliceSequence seq;
  LabelVector labels;
  std::vector<std::size_t> planted_zone;  // per class; SIZE_MAX when absent
  ReportText report_raw;
  ReportText report_positive;
};

// Deterministic sample `index` of the world described by cfg, drawn from a
// per-index counter stream of `seed`.
inline SyntheticSample generate_sample(const DatasetConfig& cfg, const std::vector<ConditionSpec>& conds,
                                       uint64_t seed, std::size_t index) {
  Rng rng(splitmix64(seed * 0x9E3779B97F4A7C15ULL + splitmix64(index + 1)));
  SyntheticSample s;
  s.index = index;
  const std::size_t n = cfg.n_min + rng.index(cfg.n_max - cfg.n_min + 1);
  const std::size_t d = cfg.d_v;

  // Invalid slices never fall below the zone count of valid ones.
  s.seq.valid.assign(n, true);
  for (std::size_t i = 0; i < n; ++i)
    if (rng.uniform() < cfg.invalid_fraction) s.seq.valid[i] = false;
  if (s.seq.valid_count() < cfg.zones) s.seq.valid.assign(n, true);
  const double spacing = 1.0 + rng.uniform();
  const double z0 = -200.0 + 50.0 * rng.uniform();
  s.seq.z_mm.resize(n);
  for (std::size_t i = 0; i < n; ++i) s.seq.z_mm[i] = z0 + spacing * static_cast<double>(i);

  std::vector<double> emb(n * d);
  for (auto& v : emb) v = cfg.noise * rng.normal();

  s.labels.values.assign(cfg.classes, false);
  if (rng.uniform() >= cfg.normal_fraction) {
    const bool any_prevalence =
        std::any_of(conds.begin(), conds.end(), [](const ConditionSpec& c) { return c.prevalence > 0.0; });
    while (any_prevalence && s.labels.positives() == 0) {
      for (std::size_t c = 0; c < cfg.classes; ++c) s.labels.values[c] = rng.uniform() < conds[c].prevalence;
    }
  }

  std::vector<std::size_t> valid_idx;
  for (std::size_t i = 0; i < n; ++i)
    if (s.seq.valid[i]) valid_idx.push_back(i);
  const ZoneBounds zones = partition_zones(valid_idx.size(), cfg.zones);
  s.planted_zone.assign(cfg.classes, SIZE_MAX);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    if (!s.labels.values[c]) continue;
    const auto& cs = conds[c];
    const std::size_t z = cs.zone_lo + rng.index(cs.zone_hi - cs.zone_lo);
    s.planted_zone[c] = z;
    for (std::size_t j = zones[z].first; j < zones[z].second; ++j) {
      double* row = &emb[valid_idx[j] * d];
      for (std::size_t k = 0; k < d; ++k) row[k] += cs.strength * cs.signature[k];
    }
  }
  s.seq.embeddings = Tensor::from({n, d}, std::move(emb));
  s.report_raw = build_raw_narrative_text(s.labels, conds, rng);
  s.report_positive = build_positive_findings_text(s.labels, conds, rng);
  return s;
}

inline std::vector<SyntheticSample> generate_dataset(const DatasetConfig& cfg, std::size_t n, uint64_t seed,
                                                     std::size_t first_index = 0) {
  if (n == 0) throw ContractError("generate_dataset: n must be >= 1");
  const auto conds = make_conditions(cfg);
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(cfg, conds, seed, first_index + i));
  return out;
}

// Generic language corpus: random sentence sequences over every sentence the
// benchmark uses, each line ending in [EOR].
inline std::vector<std::vector<std::size_t>> generic_corpus(const Tokenizer& tok, std::size_t lines,
                                                            std::size_t min_sent, std::size_t max_sent, Rng& rng) {
  std::vector<std::string> sentences(boilerplate_sentences());
  for (const auto& c : detail::condition_table()) sentences.emplace_back(c.sentence);
  sentences.push_back(normal_sentence());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t l = 0; l < lines; ++l) {
    std::vector<std::size_t> ids{tok.special().bos};
    const std::size_t k = min_sent + rng.index(max_sent - min_sent + 1);
    for (std::size_t s = 0; s < k; ++s) {
      const auto w = tok.tokenize(split_words(sentences[rng.index(sentences.size())]));
      ids.insert(ids.end(), w.begin(), w.end());
    }
    ids.push_back(tok.special().eor);
    out.push_back(std::move(ids));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset export: "GLDS" | u32 version | JSON header | records | CRC-64.

inline constexpr uint32_t kDatasetVersion = 1;

inline std::string encode_dataset(const std::vector<SyntheticSample>& data, const DatasetConfig& cfg, uint64_t seed,
                                  const Tokenizer& tok) {
  io::Writer w;
  w.bytes("GLDS", 4);
  w.u32(kDatasetVersion);
  const auto conds = make_conditions(cfg);
  nlohmann::json names = nlohmann::json::array();
  for (const auto& c : conds) names.push_back(c.name);
  const nlohmann::json header = {{"count", data.size()}, {"classes", cfg.classes},  {"d_v", cfg.d_v},
                                 {"zones", cfg.zones},   {"seed", seed},           {"world_seed", cfg.world_seed},
                                 {"n_min", cfg.n_min},   {"n_max", cfg.n_max},     {"class_names", names}};
  w.str(header.dump());
  auto put_text = [&](const ReportText& r) {
    const auto ids = tok.tokenize(r.words);
    w.u32(static_cast<uint32_t>(ids.size()));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      w.u32(static_cast<uint32_t>(ids[i]));
      w.u8(r.pathology[i] ? 1 : 0);
    }
  };
  for (const auto& s : data) {
    w.u64(s.index);
    w.u32(static_cast<uint32_t>(s.seq.size()));
    for (std::size_t c = 0; c < cfg.classes; ++c) w.u8(s.labels.values[c] ? 1 : 0);
    for (std::size_t c = 0; c < cfg.classes; ++c) w.u64(s.planted_zone[c]);
    w.f64s(s.seq.z_mm);
    for (bool v : s.seq.valid) w.u8(v ? 1 : 0);
    w.f64s(s.seq.embeddings.data());
    put_text(s.report_raw);
    put_text(s.report_positive);
  }
  io::seal(w);
  return std::move(w.buffer());
}

struct DatasetFile {
  nlohmann::json header;
  std::vector<SyntheticSample> samples;
};

inline DatasetFile decode_dataset(std::string_view bytes, const Tokenizer& tok) {
  const std::string_view body = io::unseal<ContractError>(bytes, "dataset");
  io::Reader<ContractError> r(body);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string_view(magic, 4) != "GLDS") throw ContractError("dataset: bad magic");
  if (const uint32_t v = r.u32(); v != kDatasetVersion) {
    throw ContractError("dataset: unsupported version " + std::to_string(v));
  }
  DatasetFile f;
  f.header = nlohmann::json::parse(r.str());
  const std::size_t count = f.header.at("count"), classes = f.header.at("classes"), d = f.header.at("d_v");
  auto get_text = [&]() {
    ReportText t;
    const uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
      t.words.push_back(tok.word(r.u32()));
      t.pathology.push_back(r.u8() != 0);
    }
    return t;
  };
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticSample s;
    s.index = r.u64();
    const uint32_t n = r.u32();
    s.labels.values.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) s.labels.values[c] = r.u8() != 0;
    s.planted_zone.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) s.planted_zone[c] = r.u64();
    s.seq.z_mm = r.f64s(n);
    s.seq.valid.resize(n);
    for (uint32_t j = 0; j < n; ++j) s.seq.valid[j] = r.u8() != 0;
    s.seq.embeddings = Tensor::from({n, d}, r.f64s(static_cast<std::size_t>(n) * d));
    s.report_raw = get_text();
    s.report_positive = get_text();
    f.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw ContractError("dataset: trailing bytes after records");
  return f;
}

// Human-readable sidecar: index, positive class names, both report texts.
inline std::string dataset_sidecar(const std::vector<SyntheticSample>& data, const std::vector<ConditionSpec>& conds) {
  std::ostringstream os;
  os << "index\tlabels\treport_raw\treport_positive\n";
  for (const auto& s : data) {
    std::string labels;
    for (std::size_t c = 0; c < conds.size(); ++c)
      if (s.labels.values[c]) labels += (labels.empty() ? "" : ",") + conds[c].name;
    os << s.index << '\t' << (labels.empty() ? "none" : labels) << '\t' << join_words(s.report_raw.words) << '\t'
       << join_words(s.report_positive.words) << '\n';
  }
  return os.str();
}

}  // namespace glab
