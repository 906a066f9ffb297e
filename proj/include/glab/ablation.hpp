// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glab/curriculum.hpp"

namespace glab {

struct AblationOptions {
  std::size_t samples = 256;  // first n validation samples by index
  SamplingConfig sampling;
  uint64_t seed = 0;
  TextMode text_mode = TextMode::kPositiveFindings;  // teacher-forcing targets
};

// Generation metrics with the grafted tokens replaced per `kind`.
inline MetricReport generation_ablation(Trainer& tr, TokenManipulation kind, const AblationOptions& opt) {
  if (kind == TokenManipulation::kShuffled && std::min(opt.samples, tr.bench().val.size()) < 2) {
    throw ContractError("shuffled ablation needs a batch of at least 2 samples");
  }
  return tr.generation(Split::kVal, opt.samples, opt.sampling, opt.seed, kind).report;
}

struct NllRow {
  TokenManipulation kind = TokenManipulation::kNormal;
  double overall = 0.0, pathology = 0.0, generic = 0.0;         // token-weighted means
  double d_overall = 0.0, d_pathology = 0.0, d_generic = 0.0;   // relative to the correct condition

  nlohmann::json to_json() const {
    return {{"condition", to_string(kind)}, {"nll", overall},           {"nll_pathology", pathology},
            {"nll_generic", generic},       {"delta", d_overall},       {"delta_pathology", d_pathology},
            {"delta_generic", d_generic}};
  }
};

// Teacher-forced NLL of the reference reports under each token condition.
// The correct condition is always evaluated first and anchors the deltas,
// which are relative changes (0.05 = +5 %).
inline std::vector<NllRow> nll_ablation(Trainer& tr, const std::vector<TokenManipulation>& kinds,
                                        const AblationOptions& opt) {
  const std::size_t n = std::min(opt.samples, tr.bench().val.size());
  std::vector<Tensor> toks;
  for (std::size_t i = 0; i < n; ++i) toks.push_back(tr.eval_tokens(Split::kVal, i));
  std::vector<TokenManipulation> all{TokenManipulation::kNormal};
  for (auto k : kinds)
    if (k != TokenManipulation::kNormal) all.push_back(k);
  std::vector<NllRow> rows;
  for (auto kind : all) {
    const std::vector<Tensor> vt = tr.manipulate(toks, kind, opt.seed);
    double so = 0.0, sp = 0.0, sg = 0.0;
    std::size_t no = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const EncodedText& t = tr.report(Split::kVal, i, opt.text_mode);
      const NllResult r = tr.model().decoder.teacher_forced_nll(tr.model().prompt(vt[i]), t.ids, t.pathology);
      for (std::size_t j = 0; j < t.ids.size(); ++j) {
        const double v = r.per_position[j];
        so += v;
        ++no;
        if (t.pathology[j]) {
          sp += v;
          ++np;
        } else {
          sg += v;
          ++ng;
        }
      }
    }
    NllRow row;
    row.kind = kind;
    row.overall = no ? so / static_cast<double>(no) : 0.0;
    row.pathology = np ? sp / static_cast<double>(np) : std::numeric_limits<double>::quiet_NaN();
    row.generic = ng ? sg / static_cast<double>(ng) : std::numeric_limits<double>::quiet_NaN();
    rows.push_back(row);
  }
  const NllRow& base = rows.front();
  for (auto& r : rows) {
    r.d_overall = (r.overall - base.overall) / base.overall;
    r.d_pathology = (r.pathology - base.pathology) / base.pathology;
    r.d_generic = (r.generic - base.generic) / base.generic;
  }
  return rows;
}

}  // namespace glab
