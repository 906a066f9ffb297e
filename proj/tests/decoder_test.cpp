// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "test_util.hpp"

namespace glab {
namespace {

using testing::max_abs_diff;
using testing::randn;
using testing::tiny_decoder;

// A tiny decoder plus its store, with adapters randomised so the visual
// pathway and LoRA deltas are live.
struct Fixture {
  ParameterStore store;
  Rng rng;
  Decoder dec;
  explicit Fixture(DecoderConfig cfg = tiny_decoder(), uint64_t seed = 1, bool live = true)
      : rng(seed), dec(cfg, store, rng) {
    if (live) {
      testing::randomize_group(store, "lora", rng, 0.2);
      testing::randomize_group(store, "xattn", rng, 0.4);
    }
  }
  GraftedPrompt prompt(std::size_t k) { return make_chat_prompt(dec.config().special, k, randn({k, 8}, rng)); }
};

std::vector<double> row(const Tensor& t, std::size_t r) {
  return {t.data().begin() + static_cast<long>(r * t.cols()), t.data().begin() + static_cast<long>((r + 1) * t.cols())};
}

TEST(Graft, NoPlaceholdersIsTableLookup) {
  Rng rng(1);
  const Tensor table = randn({10, 4}, rng);
  const std::vector<std::size_t> toks{3, 1, 7};
  const Tensor x = graft(toks, {false, false, false}, Tensor{}, table);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(max_abs_diff(row(x, i), row(table, toks[i])), 0.0);
}

TEST(Graft, AllPlaceholdersIsVisual) {
  Rng rng(2);
  const Tensor table = randn({10, 4}, rng), vis = randn({3, 4}, rng);
  const Tensor x = graft({3, 3, 3}, {true, true, true}, vis, table);
  EXPECT_EQ(max_abs_diff(x.data(), vis.data()), 0.0);
}

TEST(Graft, MaskCountMismatchIsRejected) {
  Rng rng(3);
  const Tensor table = randn({10, 4}, rng);
  EXPECT_THROW(graft({1, 3, 3}, {false, true, true}, randn({3, 4}, rng), table), ContractError);
}

TEST(Graft, GradientReachesOnlyScatteredRow) {
  Rng rng(4);
  ParameterStore s;
  Tensor vis = testing::param(s, "vis", randn({2, 4}, rng));
  const Tensor table = randn({10, 4}, rng);
  const std::vector<bool> mask{false, true, false, true};
  // Readout touches only position 0 and 2 (text) and position 3 (visual row 1).
  const Tensor w = Tensor::from({4, 4}, {1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2});
  sum(mul(graft({5, 3, 6, 3}, mask, vis, table), w)).backward();
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(vis.grad()[j], 0.0);
    EXPECT_EQ(vis.grad()[4 + j], 2.0);
  }
}

TEST(ChatPrompt, LayoutAndValidation) {
  SpecialTokens sp;
  const GraftedPrompt p = make_chat_prompt(sp, 3, Tensor::zeros({3, 8}));
  const std::vector<std::size_t> expect{sp.bos, sp.sys, sp.vis, sp.vis, sp.vis, sp.usr, sp.asst};
  EXPECT_EQ(p.token_ids, expect);
  EXPECT_EQ(p.placeholders(), 3u);
  GraftedPrompt bad = p;
  bad.visual_tokens = Tensor::zeros({2, 8});
  EXPECT_THROW(validate_prompt(bad), ContractError);
}

TEST(LayerInject, ZeroOutputProjectionIsIdentity) {
  Fixture f;
  f.store.assign("xattn.0.o_proj.weight", std::vector<double>(64, 0.0));
  const Tensor h = randn({5, 8}, f.rng);
  const Tensor y = f.dec.layer_inject(h, randn({3, 8}, f.rng), 0);
  EXPECT_EQ(max_abs_diff(y.data(), h.data()), 0.0);
}

TEST(LayerInject, SingleVisualTokenIgnoresQueries) {
  // With K = 1 the softmax weight is 1, so the read is independent of h and
  // the residual difference is the same for every row.
  Fixture f;
  const Tensor v = randn({1, 8}, f.rng);
  const Tensor h = randn({4, 8}, f.rng);
  const Tensor y = f.dec.layer_inject(h, v, 1);
  const Tensor d = sub(y, h);
  for (std::size_t r = 1; r < 4; ++r) EXPECT_LT(max_abs_diff(row(d, 0), row(d, r)), 1e-12);
}

TEST(LayerInject, GradientCheck) {
  Fixture f;
  Tensor h = testing::param(f.store, "h", randn({3, 8}, f.rng));
  Tensor v = testing::param(f.store, "v", randn({2, 8}, f.rng));
  const Tensor probe = randn({3, 8}, f.rng);
  ParameterStore only;
  for (const auto& n : f.store.names_in_group("xattn")) only.add(n, f.store.get(n), "xattn");
  only.add("projectors.0.weight", f.store.get("projectors.0.weight"), "projectors");
  only.add("h", h, "heads");
  only.add("v", v, "heads");
  const CheckReport r = grad_check([&] { return sum(mul(f.dec.layer_inject(h, v, 0), probe)); }, only);
  EXPECT_TRUE(r.passed) << r.failure << " " << r.max_rel_err;
}

TEST(DecodeStep, CachedDecodingMatchesFullForward) {
  Fixture f;
  GraftedPrompt p = f.prompt(3);
  DecodeCache cache;
  std::vector<double> logits = f.dec.prefill(p, cache);
  const std::vector<std::size_t> cont{9, 12, 7, 30};
  for (std::size_t t = 0; t <= cont.size(); ++t) {
    GraftedPrompt full = p;
    full.token_ids.insert(full.token_ids.end(), cont.begin(), cont.begin() + static_cast<long>(t));
    full.placeholder_mask.resize(full.token_ids.size(), false);
    const Tensor ref = f.dec.forward(full).logits;
    EXPECT_LT(max_abs_diff(logits, row(ref, full.token_ids.size() - 1)), 1e-10) << "step " << t;
    if (t < cont.size()) logits = f.dec.decode_step(cache, cont[t]);
  }
}

TEST(DecodeStep, AdapterCounterIsOnePlusGenerated) {
  Fixture f;
  SamplingConfig sc;
  sc.max_new_tokens = 17;
  for (uint64_t seed : {1u, 2u, 3u}) {
    sc.seed = seed;
    f.dec.reset_adapter_calls();
    const auto out = f.dec.generate(f.prompt(4), sc);
    for (std::size_t c : f.dec.adapter_calls()) EXPECT_EQ(c, 1 + out.size());
  }
}

TEST(DecodeStep, ZeroVisualWithZeroOutputMatchesTextOnly) {
  Fixture f;
  for (std::size_t l : tiny_decoder().inject_layers)
    f.store.assign("xattn." + std::to_string(l) + ".o_proj.weight", std::vector<double>(64, 0.0));
  // The text-only reference sees a zero embedding row at the placeholder id
  // and no visual input at all.
  const std::size_t vis = f.dec.config().special.vis;
  auto table = f.store.get("embed_tokens.weight").mutable_data();
  for (std::size_t j = 0; j < 8; ++j) table[vis * 8 + j] = 0.0;
  const GraftedPrompt grafted = make_chat_prompt(f.dec.config().special, 2, Tensor::zeros({2, 8}));
  GraftedPrompt text = grafted;
  text.placeholder_mask.assign(text.token_ids.size(), false);
  text.visual_tokens = Tensor{};
  EXPECT_EQ(max_abs_diff(f.dec.forward(grafted).logits.data(), f.dec.forward(text).logits.data()), 0.0);
  DecodeCache ca, cb;
  auto la = f.dec.prefill(grafted, ca), lb = f.dec.prefill(text, cb);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(max_abs_diff(la, lb), 0.0);
    la = f.dec.decode_step(ca, 8 + t);
    lb = f.dec.decode_step(cb, 8 + t);
  }
}

TEST(DecodeStep, VisualPerturbationReachesEveryStep) {
  Fixture f;
  GraftedPrompt p = f.prompt(3);
  GraftedPrompt q = p;
  std::vector<double> v(p.visual_tokens.data().begin(), p.visual_tokens.data().end());
  for (std::size_t j = 0; j < 8; ++j) v[8 + j] += 0.5;
  q.visual_tokens = Tensor::from({3, 8}, v);
  DecodeCache ca, cb;
  auto la = f.dec.prefill(p, ca), lb = f.dec.prefill(q, cb);
  for (std::size_t t = 0; t < 6; ++t) {
    EXPECT_GT(max_abs_diff(la, lb), 1e-9) << "step " << t;
    la = f.dec.decode_step(ca, 10 + t);
    lb = f.dec.decode_step(cb, 10 + t);
  }
}

TEST(Causality, FutureTokensDoNotAffectPast) {
  Fixture f;
  GraftedPrompt p = f.prompt(2);
  p.token_ids.insert(p.token_ids.end(), {8, 9, 10, 11});
  p.placeholder_mask.resize(p.token_ids.size(), false);
  const Tensor a = f.dec.forward(p).logits;
  p.token_ids.back() = 20;
  p.token_ids[p.token_ids.size() - 2] = 21;
  const Tensor b = f.dec.forward(p).logits;
  for (std::size_t t = 0; t + 2 < p.token_ids.size(); ++t) EXPECT_EQ(max_abs_diff(row(a, t), row(b, t)), 0.0);
}

TEST(Batching, SegmentsMatchSeparateForwards) {
  Fixture f;
  GraftedPrompt p1 = f.prompt(2), p2 = f.prompt(3);
  DecoderBatch b;
  b.append(p1.token_ids, p1.placeholder_mask, 2);
  b.append(p2.token_ids, p2.placeholder_mask, 3);
  b.visual = concat_rows({p1.visual_tokens, p2.visual_tokens});
  const Tensor joint = f.dec.forward(b).logits;
  const Tensor r1 = f.dec.forward(p1).logits, r2 = f.dec.forward(p2).logits;
  EXPECT_LT(max_abs_diff(slice_rows(joint, 0, r1.rows()).data(), r1.data()), 1e-12);
  EXPECT_LT(max_abs_diff(slice_rows(joint, r1.rows(), joint.rows()).data(), r2.data()), 1e-12);
}

TEST(Generate, GreedyIsArgmaxPath) {
  Fixture f;
  GraftedPrompt p = f.prompt(2);
  SamplingConfig sc;
  sc.greedy = true;
  sc.repetition_penalty = 1.0;
  sc.no_repeat_ngram = 0;
  sc.max_new_tokens = 8;
  const auto out = f.dec.generate(p, sc);
  GraftedPrompt cur = p;
  for (std::size_t t : out) {
    const Tensor lg = f.dec.forward(cur).logits;
    const auto last = row(lg, lg.rows() - 1);
    EXPECT_EQ(t, static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin()));
    cur.token_ids.push_back(t);
    cur.placeholder_mask.push_back(false);
  }
}

TEST(Generate, NoRepeatedFiveGram) {
  // A decoder biased towards a tight loop still never repeats a 5-gram.
  Fixture f(tiny_decoder(12), 5);
  SamplingConfig sc;
  sc.temperature = 0.2;
  sc.repetition_penalty = 1.0;
  sc.max_new_tokens = 120;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    sc.seed = seed;
    const auto out = f.dec.generate(f.prompt(2), sc);
    std::set<std::vector<std::size_t>> seen;
    for (std::size_t i = 0; i + 5 <= out.size(); ++i) {
      std::vector<std::size_t> g(out.begin() + static_cast<long>(i), out.begin() + static_cast<long>(i + 5));
      EXPECT_TRUE(seen.insert(g).second) << "repeat at " << i;
    }
  }
}

TEST(Sampling, FullNucleusMatchesMultinomialOracle) {
  const std::vector<double> logits{0.3, -1.0, 2.0, 0.0, 1.1};
  const double temp = 0.7;
  // Oracle: inverse-CDF over softmax(logits / T) in index order.
  std::vector<double> p(5);
  double z = 0;
  for (int i = 0; i < 5; ++i) z += p[i] = std::exp(logits[i] / temp);
  Rng rng(9);
  for (int trial = 0; trial < 2000; ++trial) {
    const double u = rng.uniform();
    double acc = 0;
    std::size_t expect = 4;
    for (std::size_t i = 0; i < 5; ++i) {
      acc += p[i] / z;
      if (u < acc) {
        expect = i;
        break;
      }
    }
    ASSERT_EQ(sample_nucleus(logits, temp, 1.0, u, 0), expect);
  }
}

TEST(Sampling, NucleusKeepsSmallestCoveringSet) {
  // Probabilities 0.5, 0.3, 0.2: top_p 0.7 keeps the first two.
  const std::vector<double> logits{std::log(0.5), std::log(0.3), std::log(0.2)};
  std::map<std::size_t, int> hits;
  for (int i = 0; i < 1000; ++i) ++hits[sample_nucleus(logits, 1.0, 0.7, (i + 0.5) / 1000.0, 99)];
  EXPECT_EQ(hits.count(2), 0u);
  EXPECT_NEAR(hits[0] / 1000.0, 0.625, 0.002);
}

TEST(Sampling, EmptyNucleusFallsBack) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(sample_nucleus({-inf, -inf}, 1.0, 0.9, 0.3, 6), 6u);
}

TEST(Sampling, RepetitionPenaltySemantics) {
  std::vector<double> l{2.0, -2.0, 1.0};
  apply_repetition_penalty(l, {0, 1, 0}, 2.0);
  EXPECT_EQ(l, (std::vector<double>{1.0, -4.0, 1.0}));
}

TEST(Sampling, NoRepeatMaskBlocksCompletion) {
  std::vector<double> l(6, 0.0);
  apply_no_repeat_ngram(l, {1, 2, 3, 1, 2}, 3);
  EXPECT_TRUE(std::isinf(l[3]) && l[3] < 0);
  for (std::size_t i : {0u, 1u, 2u, 4u, 5u}) EXPECT_EQ(l[i], 0.0);
}

TEST(Sampling, InvalidConfigRejected) {
  SamplingConfig sc;
  sc.top_p = 0.0;
  EXPECT_THROW(sc.validate(), ConfigError);
  sc = {};
  sc.repetition_penalty = 0.9;
  EXPECT_THROW(sc.validate(), ConfigError);
}

TEST(TeacherForcedNll, UniformModelGivesLogVocab) {
  Fixture f(tiny_decoder(100), 3, false);
  f.store.assign("lm_head.weight", std::vector<double>(100 * 8, 0.0));
  const NllResult r = f.dec.teacher_forced_nll(f.prompt(2), {10, 20, 30}, {true, false, false});
  for (double v : r.per_position) EXPECT_NEAR(v, std::log(100.0), 1e-12);
  EXPECT_NEAR(r.pathology, std::log(100.0), 1e-12);
  EXPECT_NEAR(r.generic, std::log(100.0), 1e-12);
}

TEST(TeacherForcedNll, GreedyPathOfPeakedModelIsNearZero) {
  Fixture f(tiny_decoder(), 4, false);
  auto head = f.store.get("lm_head.weight").mutable_data();
  for (auto& v : head) v *= 400.0;
  SamplingConfig sc;
  sc.greedy = true;
  sc.repetition_penalty = 1.0;
  sc.no_repeat_ngram = 0;
  sc.max_new_tokens = 5;
  GraftedPrompt p = f.prompt(1);
  const auto path = f.dec.generate(p, sc);
  const NllResult r = f.dec.teacher_forced_nll(p, path, std::vector<bool>(path.size(), false));
  EXPECT_LT(r.mean, 0.05);
  EXPECT_TRUE(std::isnan(r.pathology));
}

TEST(Lora, ZeroBIsIdentityAndDeltaHasLowRank) {
  Rng rng(6);
  const Tensor base = randn({6, 5}, rng), a = randn({2, 5}, rng);
  EXPECT_EQ(max_abs_diff(lora_apply(base, a, Tensor::zeros({6, 2}), 2.0).data(), base.data()), 0.0);
  const Tensor delta = sub(lora_apply(base, a, randn({6, 2}, rng), 2.0), base);
  const ThinSvd s = svd_thin(delta, 5);
  EXPECT_GT(s.s[1], 1e-6);
  for (std::size_t i = 2; i < 5; ++i) EXPECT_LT(s.s[i], 1e-10 * s.s[0]);
}

TEST(Lora, UntrainedAdaptersLeaveLogitsBitIdentical) {
  Fixture f(tiny_decoder(), 7, false);
  const GraftedPrompt p = f.prompt(0);
  const Tensor on = f.dec.forward(p).logits;
  f.dec.set_lora_enabled(false);
  const Tensor off = f.dec.forward(p).logits;
  EXPECT_EQ(max_abs_diff(on.data(), off.data()), 0.0);
}

TEST(Lora, GradientReachesAdaptersNotFrozenBase) {
  Fixture f(tiny_decoder(), 8, true);
  GraftedPrompt p = f.prompt(2);
  f.store.zero_grad();
  sum(f.dec.forward(p).logits).backward();
  bool a_hit = false, b_hit = false;
  for (const auto& n : f.store.names_in_group("lora")) {
    const Tensor& t = f.store.get(n);
    const auto g = t.grad_or_zeros();
    const bool nz = std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
    (n.ends_with("lora_A") ? a_hit : b_hit) |= nz;
  }
  EXPECT_TRUE(a_hit);
  EXPECT_TRUE(b_hit);
  for (const auto& n : f.store.names_in_group("base")) EXPECT_FALSE(f.store.get(n).has_grad()) << n;
}

TEST(BridgeLayout, CountsFollowConfig) {
  DecoderConfig c;
  c.layers = 28;
  c.inject_layers = {7, 14, 21};
  const BridgeLayout b = bridge_layout(c);
  EXPECT_EQ(b.projectors, 3u);
  EXPECT_EQ(b.xattn, 21u);
  EXPECT_EQ(b.lora, 392u);
}

TEST(DecoderConfig, InvalidInjectLayersRejected) {
  DecoderConfig c = tiny_decoder();
  c.inject_layers = {2, 1};
  EXPECT_THROW(c.validate(), ConfigError);
  c.inject_layers = {3};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_decoder();
  c.lora_rank = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace glab
