// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <regex>

#include "test_util.hpp"

namespace glab {
namespace {

std::map<std::string, std::vector<double>> snapshot_all(const ParameterStore& s) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& e : s.entries()) out[e.name].assign(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

std::set<std::string> changed_tensors(const std::map<std::string, std::vector<double>>& before,
                                      const ParameterStore& s) {
  std::set<std::string> out;
  for (const auto& e : s.entries())
    if (!std::equal(e.tensor.data().begin(), e.tensor.data().end(), before.at(e.name).begin())) out.insert(e.name);
  return out;
}

ModelConfig bridge_model(std::size_t layers, std::vector<std::size_t> inject, std::size_t rank) {
  ModelConfig m = testing::tiny_model(64);
  m.decoder.layers = layers;
  m.decoder.inject_layers = std::move(inject);
  m.decoder.lora_rank = rank;
  return m;
}

// Tensor counts by naming rule: one projector per injection layer, seven
// cross-attention tensors per adapter and an A/B pair on seven projections
// of every block.
std::map<std::string, std::size_t> enumerate_bridge(const ParameterStore& s) {
  const std::regex proj(R"(projectors\.\d+\.weight)");
  const std::regex xattn(R"(xattn\.\d+\.((q|k|v|o)_proj\.weight|norm\.(weight|bias)|gate))");
  const std::regex lora(R"(layers\.\d+\.(attn|mlp)\.\w+_proj\.lora_(A|B))");
  std::map<std::string, std::size_t> n{{"projectors", 0}, {"xattn", 0}, {"lora", 0}};
  for (const auto& e : s.entries()) {
    n["projectors"] += std::regex_match(e.name, proj);
    n["xattn"] += std::regex_match(e.name, xattn);
    n["lora"] += std::regex_match(e.name, lora);
  }
  return n;
}

TEST(FreezePolicy, PhaseTables) {
  GlabModel m(testing::tiny_model(64), 1);
  auto frozen = [&](const std::string& g) {
    for (const auto& n : m.store.names_in_group(g))
      if (!m.store.entry(n).frozen) return false;
    return true;
  };
  apply_freeze_policy(m.store, default_phase_config(3));
  EXPECT_TRUE(frozen("encoder"));
  EXPECT_FALSE(frozen("lora"));
  EXPECT_FALSE(frozen("xattn"));
  EXPECT_TRUE(frozen("base"));
  apply_freeze_policy(m.store, default_phase_config(4));
  EXPECT_TRUE(frozen("xattn"));
  EXPECT_TRUE(frozen("projectors"));
  EXPECT_FALSE(frozen("lora"));
  EXPECT_TRUE(frozen("encoder"));
  apply_freeze_policy(m.store, default_phase_config(1));
  EXPECT_FALSE(frozen("encoder"));
  EXPECT_TRUE(frozen("lora"));
  PhaseConfig bad = default_phase_config(3);
  bad.trainable_groups.push_back("vision_tower");
  EXPECT_THROW(apply_freeze_policy(m.store, bad), ConfigError);
  PhaseConfig base = default_phase_config(3);
  base.trainable_groups.push_back("base");
  apply_freeze_policy(m.store, base);
  EXPECT_TRUE(frozen("base"));
}

TEST(FreezePolicy, OptimizerLeavesFrozenBitIdentical) {
  GlabModel m(testing::tiny_model(64), 2);
  Rng rng(3);
  apply_freeze_policy(m.store, default_phase_config(4));
  const auto before = snapshot_all(m.store);
  AdamW opt;
  for (int step = 0; step < 3; ++step) {
    m.store.zero_grad();
    Tensor total = Tensor::scalar(0.0);
    for (auto& e : m.store.entries()) total = add(total, sum(mul(e.tensor, e.tensor)));
    total.backward();
    opt.step(m.store, 1e-2);
  }
  for (const auto& name : changed_tensors(before, m.store)) {
    const auto& g = m.store.entry(name).group;
    EXPECT_TRUE(g == "lora" || g == "heads") << name;
  }
  for (const auto& e : m.store.entries())
    if (e.frozen) {
      EXPECT_EQ(before.at(e.name), std::vector<double>(e.tensor.data().begin(), e.tensor.data().end()));
    }
}

TEST(WarmBridge, FullScaleCountsSum) {
  GlabModel target(bridge_model(28, {7, 14, 21}, 2), 1), source(bridge_model(28, {7, 14, 21}, 2), 2);
  const auto rep = warm_bridge_transfer(target.store, source.checkpoint());
  EXPECT_EQ(rep.transferred.at("projectors"), 3u);
  EXPECT_EQ(rep.transferred.at("xattn"), 21u);
  EXPECT_EQ(rep.transferred.at("lora"), 392u);
  EXPECT_EQ(rep.total(), 416u);
  EXPECT_TRUE(rep.complete());
}

TEST(WarmBridge, ToyCountsMatchEnumeration) {
  GlabModel target(bridge_model(8, {2, 4, 6}, 4), 1), source(bridge_model(8, {2, 4, 6}, 4), 2);
  const auto expect = enumerate_bridge(target.store);
  EXPECT_EQ(expect.at("projectors"), 3u);
  const auto rep = warm_bridge_transfer(target.store, source.checkpoint());
  EXPECT_EQ(rep.transferred, expect);
  const BridgeLayout l = bridge_layout(target.config().decoder);
  EXPECT_EQ(rep.total(), l.projectors + l.xattn + l.lora);
}

TEST(WarmBridge, ChangesExactlyBridgeGroups) {
  GlabModel target(testing::tiny_model(64), 1), source(testing::tiny_model(64), 2);
  Rng rng(5);
  for (const auto& g : bridge_groups()) testing::randomize_group(source.store, g, rng);
  const auto before = snapshot_all(target.store);
  warm_bridge_transfer(target.store, source.checkpoint());
  std::set<std::string> expected;
  for (const auto& g : bridge_groups())
    for (const auto& n : target.store.names_in_group(g)) expected.insert(n);
  EXPECT_EQ(changed_tensors(before, target.store), expected);
  for (const auto& n : expected)
    EXPECT_EQ(target.store.get(n).data()[0], source.store.get(n).data()[0]) << n;
}

TEST(WarmBridge, SelfTransferAndDryRunAreNoOps) {
  GlabModel m(testing::tiny_model(64), 1), other(testing::tiny_model(64), 7);
  Rng rng(6);
  testing::randomize_group(other.store, "lora", rng);
  const std::string bytes = encode_checkpoint(m.checkpoint());
  warm_bridge_transfer(m.store, m.checkpoint());
  EXPECT_EQ(encode_checkpoint(m.checkpoint()), bytes);
  const auto rep = warm_bridge_transfer(m.store, other.checkpoint(), true);
  EXPECT_TRUE(rep.dry_run);
  EXPECT_GT(rep.total(), 0u);
  EXPECT_EQ(encode_checkpoint(m.checkpoint()), bytes);
  EXPECT_NE(rep.summary().find("dry run"), std::string::npos);
}

TEST(WarmBridge, MissingOrMismatchedAbortsUntouched) {
  GlabModel target(bridge_model(3, {0, 2}, 2), 1), shallow(bridge_model(2, {0, 1}, 2), 2);
  const std::string bytes = encode_checkpoint(target.checkpoint());
  try {
    warm_bridge_transfer(target.store, shallow.checkpoint());
    ADD_FAILURE() << "transfer from a shallower model accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.2."), std::string::npos) << e.what();
  }
  EXPECT_EQ(encode_checkpoint(target.checkpoint()), bytes);
  GlabModel wide(bridge_model(3, {0, 2}, 3), 3);
  EXPECT_THROW(warm_bridge_transfer(target.store, wide.checkpoint()), CheckpointError);
  EXPECT_EQ(encode_checkpoint(target.checkpoint()), bytes);
}

TEST(PhaseConfigJson, RoundTripAndValidation) {
  for (int p = 1; p <= 4; ++p) {
    PhaseConfig c = default_phase_config(p);
    c.seed = 41;
    c.weights.ewc = 2.5;
    const auto j = to_json(c);
    EXPECT_EQ(to_json(phase_config_from_json(j)), j);
    for (const auto& [k, _] : j.items()) {
      auto without = j;
      without.erase(k);
      if (k == "phase_id") {
        EXPECT_THROW(phase_config_from_json(without), ConfigError);
      }
    }
  }
  auto j = to_json(default_phase_config(3));
  j["learning_rate"] = 0.1;
  EXPECT_THROW(phase_config_from_json(j), ConfigError);
  j = to_json(default_phase_config(3));
  j["text_mode"] = "none";
  EXPECT_THROW(phase_config_from_json(j), ConfigError);
  j = to_json(default_phase_config(2));
  j["lr"] = -1.0;
  EXPECT_THROW(phase_config_from_json(j), ConfigError);
  EXPECT_THROW(phase_config_from_json(nlohmann::json{{"phase_id", 5}}), ConfigError);
  EXPECT_EQ(phase_config_from_json(nlohmann::json{{"phase_id", 4}}).text_mode, TextMode::kRawNarrative);
}

TEST(ModelConfigJson, RoundTrip) {
  const ModelConfig m = ModelConfig::bench();
  EXPECT_EQ(to_json(model_config_from_json(to_json(m))), to_json(m));
  auto j = to_json(m);
  j["decoder"]["depth"] = 3;
  EXPECT_THROW(model_config_from_json(j), ConfigError);
}

TEST(Derangement, NoFixedPoints) {
  for (std::size_t n = 2; n < 40; ++n) {
    const auto p = derangement(n, n);
    std::vector<bool> seen(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NE(p[i], i);
      seen[p[i]] = true;
    }
    EXPECT_EQ(std::count(seen.begin(), seen.end(), true), static_cast<long>(n));
    EXPECT_EQ(derangement(n, n), p);
  }
  EXPECT_THROW(derangement(1, 0), ContractError);
}

// Short end-to-end curriculum on a tiny world.
class TinyCurriculum : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    bench_ = new Benchmark(Benchmark::generate(testing::tiny_world(), 160, 32, 1));
    model_ = new GlabModel(testing::tiny_model(bench_->tok.size()), 1);
    trainer_ = new Trainer(*model_, *bench_);
    trainer_->pretrain_base(PretrainConfig{.lines = 200, .epochs = 1, .seed = 1});
    trainer_->prepare_text_space();
  }
  static void TearDownTestSuite() {
    delete trainer_;
    delete model_;
    delete bench_;
  }
  static PhaseConfig quick(int phase, std::size_t epochs) {
    PhaseConfig c = default_phase_config(phase);
    c.epochs = epochs;
    c.samples_per_epoch = 32;
    c.val_samples = 8;
    c.sampling.max_new_tokens = 24;
    return c;
  }
  static Benchmark* bench_;
  static GlabModel* model_;
  static Trainer* trainer_;
};
Benchmark* TinyCurriculum::bench_ = nullptr;
GlabModel* TinyCurriculum::model_ = nullptr;
Trainer* TinyCurriculum::trainer_ = nullptr;

TEST_F(TinyCurriculum, WhiteningNeededBeforeAlignment) {
  GlabModel fresh(testing::tiny_model(bench_->tok.size()), 1);
  Trainer t(fresh, *bench_);
  EXPECT_THROW(t.run_phase(quick(2, 1)), ContractError);
}

TEST_F(TinyCurriculum, FrozenGroupsUntouchedAcrossPhases) {
  for (int p = 1; p <= 4; ++p) {
    const PhaseConfig pc = quick(p, 2);
    const auto before = snapshot_all(model_->store);
    const PhaseResult r = trainer_->run_phase(pc);
    ASSERT_FALSE(r.diverged) << r.divergence;
    ASSERT_EQ(r.history.size(), 2u);
    const std::set<std::string> train(pc.trainable_groups.begin(), pc.trainable_groups.end());
    for (const auto& n : changed_tensors(before, model_->store))
      EXPECT_TRUE(train.count(model_->store.entry(n).group)) << "phase " << p << ": " << n;
    for (const auto& e : r.history) {
      if (p >= 3) {
        EXPECT_TRUE(std::isfinite(e.gen_f1));
        EXPECT_TRUE(std::isnan(e.cls_f1));
      } else {
        EXPECT_TRUE(std::isfinite(e.cls_f1));
      }
    }
    EXPECT_EQ(r.best.metadata["phase"], p);
    EXPECT_GE(r.best_epoch, 1u);
    EXPECT_EQ(r.best_metric, r.selection_curve()[r.best_epoch - 1]);
  }
}

TEST_F(TinyCurriculum, WarmStartLogsTransferCounts) {
  const Checkpoint prev = model_->checkpoint();
  std::vector<std::string> logs;
  Trainer t(*model_, *bench_, [&](const std::string& s) { logs.push_back(s); });
  const PhaseResult r = t.run_phase(quick(3, 1), &prev);
  ASSERT_TRUE(r.transfer.has_value());
  EXPECT_EQ(r.transfer->transferred, enumerate_bridge(model_->store));
  EXPECT_TRUE(std::any_of(logs.begin(), logs.end(), [](const std::string& s) { return s.find("warm bridge") == 0; }));
  EXPECT_EQ(r.best.metadata["transfer"]["total"], r.transfer->total());
}

TEST_F(TinyCurriculum, LoraFreezesAtConfiguredEpoch) {
  PhaseConfig pc = quick(3, 3);
  pc.lora_freeze_epoch = 2;
  const PhaseResult r = trainer_->run_phase(pc);
  ASSERT_EQ(r.history.size(), 3u);
  EXPECT_FALSE(r.history[0].lora_frozen);
  EXPECT_TRUE(r.history[1].lora_frozen);
  EXPECT_TRUE(r.history[2].lora_frozen);
}

TEST_F(TinyCurriculum, PhasesAreDeterministic) {
  const Checkpoint start = model_->checkpoint();
  auto run = [&]() {
    restore_checkpoint(start, model_->store);
    return trainer_->run_phase(quick(1, 1)).history_json();
  };
  auto strip = [](nlohmann::json h) {
    for (auto& e : h) e.erase("seconds");
    return h;
  };
  EXPECT_EQ(strip(run()), strip(run()));
  restore_checkpoint(start, model_->store);
}

}  // namespace
}  // namespace glab
