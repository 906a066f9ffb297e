// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line driver: data generation, curriculum phases, evaluation,
// ablations, probing, whitening diagnostics and bridge surgery.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "glab/glab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace glab::cli {
namespace {

constexpr int kExitOk = 0, kExitConfig = 2, kExitCheckpoint = 3, kExitContract = 4;

json dataset_config_json(const DatasetConfig& c) {
  return {{"classes", c.classes},     {"n_min", c.n_min},
          {"n_max", c.n_max},         {"d_v", c.d_v},
          {"zones", c.zones},         {"normal_fraction", c.normal_fraction},
          {"prevalence", c.prevalence}, {"strength", c.strength},
          {"noise", c.noise},         {"invalid_fraction", c.invalid_fraction},
          {"world_seed", c.world_seed}};
}

DatasetConfig dataset_config_from_json(const json& j) {
  detail::check_keys(j, {"classes", "n_min", "n_max", "d_v", "zones", "normal_fraction", "prevalence", "strength",
                         "noise", "invalid_fraction", "world_seed"},
                     "dataset");
  DatasetConfig c;
  detail::read(j, "classes", c.classes, "dataset");
  detail::read(j, "n_min", c.n_min, "dataset");
  detail::read(j, "n_max", c.n_max, "dataset");
  detail::read(j, "d_v", c.d_v, "dataset");
  detail::read(j, "zones", c.zones, "dataset");
  detail::read(j, "normal_fraction", c.normal_fraction, "dataset");
  detail::read(j, "prevalence", c.prevalence, "dataset");
  detail::read(j, "strength", c.strength, "dataset");
  detail::read(j, "noise", c.noise, "dataset");
  detail::read(j, "invalid_fraction", c.invalid_fraction, "dataset");
  detail::read(j, "world_seed", c.world_seed, "dataset");
  c.validate();
  return c;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// CRC-64 of a sealed file's payload (the trailing eight bytes hold it).
std::string payload_checksum(const std::string& sealed) {
  return hex64(Crc64::of(std::string_view(sealed).substr(0, sealed.size() - 8)));
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + p.string());
  f << s;
}

// Benchmark reassembled from the files written by gen-data.
Benchmark load_benchmark(const fs::path& dir) {
  const json meta = read_json_file(dir / "dataset.json");
  Benchmark b;
  b.data = dataset_config_from_json(meta.at("config"));
  b.seed = meta.at("seed").get<uint64_t>();
  b.conds = make_conditions(b.data);
  b.train = decode_dataset(io::read_file(dir / "train.glds"), b.tok).samples;
  b.val = decode_dataset(io::read_file(dir / "val.glds"), b.tok).samples;
  return b;
}

ModelConfig model_config_for(const Benchmark& b, const std::string& path) {
  ModelConfig m = ModelConfig::bench();
  m.decoder.vocab = b.tok.size();
  m.classes = b.conds.size();
  m.encoder.d_v = m.bridge.d_v = b.data.d_v;
  if (!path.empty()) return model_config_from_json(read_json_file(path), m);
  m.validate();
  return m;
}

LogFn stderr_log(bool quiet) {
  if (quiet) return {};
  return [](const std::string& s) { std::cerr << s << '\n'; };
}

// Writes <stem>.csv and <stem>.json next to each other and prints a summary.
void emit_report(const MetricReport& r, const ReportContext& ctx, const fs::path& out, const std::string& stem,
                 const std::string& title) {
  fs::create_directories(out);
  write_text(out / (stem + ".csv"), metrics_csv(r));
  write_text(out / (stem + ".json"), metrics_json(r, ctx).dump(2) + "\n");
  std::cout << metrics_summary(r, title);
}

int phase_of(const Checkpoint& c) { return c.metadata.value("phase", 0); }

struct Common {
  uint64_t seed = 1;
  std::string data = "glab_data";
  std::string out = "glab_out";
  bool quiet = false;
};

void add_common(CLI::App* a, Common& c, bool data = true) {
  a->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  if (data) a->add_option("--data", c.data, "Dataset directory written by gen-data")->capture_default_str();
  a->add_option("--out", c.out, "Output path")->capture_default_str();
  a->add_flag("--quiet", c.quiet, "Suppress progress lines");
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"glab: grafted visual-language benchmark tools"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // gen-data
  Common gd;
  gd.out = "glab_data";
  std::size_t n_train = 4000, n_val = 512, d_v = 32;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic benchmark");
  add_common(c_gen, gd, false);
  c_gen->add_option("--train", n_train, "Training samples")->capture_default_str();
  c_gen->add_option("--val", n_val, "Validation samples")->capture_default_str();
  c_gen->add_option("--d-v", d_v, "Slice embedding width")->capture_default_str();

  // pretrain-base
  Common pb;
  pb.out = "base.ckpt";
  std::string model_cfg;
  PretrainConfig pcfg;
  auto* c_pre = app.add_subcommand("pretrain-base", "Pretrain the decoder and fit the text space");
  add_common(c_pre, pb);
  c_pre->add_option("--model-config", model_cfg, "Model architecture JSON");
  c_pre->add_option("--epochs", pcfg.epochs)->capture_default_str();
  c_pre->add_option("--lines", pcfg.lines)->capture_default_str();

  // train
  Common tr;
  tr.out = "phase.ckpt";
  int phase = 0;
  std::string config, ckpt_in, warm;
  auto* c_train = app.add_subcommand("train", "Run one curriculum phase");
  add_common(c_train, tr);
  c_train->add_option("--phase", phase, "Phase 1-4")->required()->check(CLI::Range(1, 4));
  c_train->add_option("--config", config, "Phase config JSON")->required();
  c_train->add_option("--ckpt", ckpt_in, "Starting checkpoint")->required();
  c_train->add_option("--warm-bridge", warm, "Checkpoint to copy the bridge from");

  // eval
  Common ev;
  std::string ckpt_eval;
  std::size_t eval_samples = 256;
  bool optimize = false;
  auto* c_eval = app.add_subcommand("eval", "Score a checkpoint on the validation split");
  add_common(c_eval, ev);
  c_eval->add_option("--ckpt", ckpt_eval)->required();
  c_eval->add_option("--samples", eval_samples, "Generation samples")->capture_default_str();
  c_eval->add_flag("--optimize-thresholds", optimize, "Also report leaky per-class thresholds");

  // ablate
  Common ab;
  std::string ckpt_ab, kind = "all";
  std::size_t ab_samples = 256;
  auto* c_ab = app.add_subcommand("ablate", "Generation and NLL under token manipulations");
  add_common(c_ab, ab);
  c_ab->add_option("--ckpt", ckpt_ab)->required();
  c_ab->add_option("--kind", kind)->check(CLI::IsMember({"zeroed", "random", "shuffled", "all"}))->capture_default_str();
  c_ab->add_option("--samples", ab_samples)->capture_default_str();

  // probe
  Common pr;
  std::string ckpt_probe;
  auto* c_probe = app.add_subcommand("probe", "Linear probe on pooled visual tokens");
  add_common(c_probe, pr);
  c_probe->add_option("--ckpt", ckpt_probe)->required();

  // whiten
  Common wh;
  std::string ckpt_wh;
  bool fit = false, report = false;
  auto* c_wh = app.add_subcommand("whiten", "Fit or inspect the text whitening transform");
  add_common(c_wh, wh);
  c_wh->add_option("--ckpt", ckpt_wh)->required();
  auto* o_fit = c_wh->add_flag("--fit", fit, "Refit and write --out");
  auto* o_rep = c_wh->add_flag("--report", report, "Print anisotropy before and after whitening");
  o_fit->excludes(o_rep);
  c_wh->callback([&] {
    if (!fit && !report) throw CLI::ValidationError("whiten", "one of --fit or --report is required");
  });

  // bridge-transfer
  Common bt;
  bt.out = "";
  std::string from, to;
  bool dry = false;
  auto* c_bt = app.add_subcommand("bridge-transfer", "Copy projector, cross-attention and LoRA tensors");
  c_bt->add_option("--out", bt.out, "Result path (default: overwrite --to)");
  c_bt->add_option("--seed", bt.seed, "Random seed");
  c_bt->add_option("--from", from)->required();
  c_bt->add_option("--to", to)->required();
  c_bt->add_flag("--dry-run", dry, "Report without writing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  if (c_gen->parsed()) {
    DatasetConfig cfg;
    cfg.d_v = d_v;
    const Benchmark b = Benchmark::generate(cfg, n_train, n_val, gd.seed);
    const fs::path dir = gd.out;
    fs::create_directories(dir);
    const std::string tr_bytes = encode_dataset(b.train, cfg, gd.seed, b.tok);
    const std::string va_bytes = encode_dataset(b.val, cfg, gd.seed, b.tok);
    io::atomic_write(dir / "train.glds", tr_bytes);
    io::atomic_write(dir / "val.glds", va_bytes);
    const json meta = {{"config", dataset_config_json(cfg)},
                       {"seed", gd.seed},
                       {"train", n_train},
                       {"val", n_val},
                       {"checksum", {{"train", payload_checksum(tr_bytes)}, {"val", payload_checksum(va_bytes)}}}};
    write_text(dir / "dataset.json", meta.dump(2) + "\n");
    std::cout << "train " << n_train << " checksum " << meta["checksum"]["train"].get<std::string>() << '\n'
              << "val " << n_val << " checksum " << meta["checksum"]["val"].get<std::string>() << '\n';
    return kExitOk;
  }

  if (c_pre->parsed()) {
    const Benchmark b = load_benchmark(pb.data);
    GlabModel m(model_config_for(b, model_cfg), pb.seed);
    Trainer t(m, b, stderr_log(pb.quiet));
    pcfg.seed = pb.seed;
    const auto losses = t.pretrain_base(pcfg);
    const WhiteningTransform w = t.prepare_text_space();
    save_checkpoint(m.checkpoint(nullptr, {{"phase", 0}, {"pretrain_loss", losses}}), pb.out);
    std::cout << "base checkpoint " << pb.out << ": lm loss " << losses.back() << ", variance retained "
              << w.variance_retained << '\n';
    return kExitOk;
  }

  if (c_train->parsed()) {
    PhaseConfig pc = load_phase_config(config);
    if (pc.phase_id != phase) {
      throw ConfigError("--phase " + std::to_string(phase) + " disagrees with phase_id " +
                        std::to_string(pc.phase_id) + " in " + config);
    }
    pc.seed = tr.seed;
    const Benchmark b = load_benchmark(tr.data);
    auto m = GlabModel::from_checkpoint(load_checkpoint(ckpt_in));
    Trainer t(*m, b, stderr_log(tr.quiet));
    std::optional<Checkpoint> src;
    if (!warm.empty()) src = load_checkpoint(warm);
    const PhaseResult r = t.run_phase(pc, src ? &*src : nullptr);
    save_checkpoint(r.best, tr.out);
    const fs::path stem = fs::path(tr.out).replace_extension();
    write_text(stem.string() + ".history.json", r.history_json().dump(2) + "\n");
    if (r.transfer) std::cout << r.transfer->summary() << '\n';
    std::cout << "phase " << phase << ": best epoch " << r.best_epoch << ", selection metric " << r.best_metric
              << (r.diverged ? " (diverged: " + r.divergence + ")" : "") << '\n';
    return r.diverged ? kExitContract : kExitOk;
  }

  if (c_eval->parsed()) {
    const Benchmark b = load_benchmark(ev.data);
    const Checkpoint c = load_checkpoint(ckpt_eval);
    auto m = GlabModel::from_checkpoint(c);
    Trainer t(*m, b, stderr_log(ev.quiet));
    const int ph = phase_of(c);
    ReportContext ctx{ph, ckpt_eval, ev.seed, "normal"};
    if (ph >= 3) {
      PhaseConfig pc = default_phase_config(ph);
      if (c.metadata.contains("phase_config")) pc = phase_config_from_json(c.metadata.at("phase_config"));
      const auto g = t.generation(Split::kVal, eval_samples, pc.sampling, ev.seed);
      emit_report(g.report, ctx, ev.out, "eval_generation", "generation (phase " + std::to_string(ph) + ")");
    } else {
      emit_report(t.classification_report(Split::kVal), ctx, ev.out, "eval_classification",
                  "classification (phase " + std::to_string(ph) + ")");
      if (optimize) {
        const auto cs = t.classification_scores(Split::kVal);
        const auto opt = optimize_thresholds(cs.scores, cs.labels, b.class_names());
        emit_report(opt.report, ctx, ev.out, "eval_classification_opt", "classification, optimized thresholds");
      }
    }
    return kExitOk;
  }

  if (c_ab->parsed()) {
    const Benchmark b = load_benchmark(ab.data);
    const Checkpoint c = load_checkpoint(ckpt_ab);
    auto m = GlabModel::from_checkpoint(c);
    Trainer t(*m, b, stderr_log(ab.quiet));
    std::vector<TokenManipulation> kinds;
    if (kind == "all") {
      kinds = {TokenManipulation::kZeroed, TokenManipulation::kRandom, TokenManipulation::kShuffled};
    } else {
      kinds = {parse_manipulation(kind)};
    }
    AblationOptions opt;
    opt.samples = ab_samples;
    opt.seed = ab.seed;
    if (c.metadata.contains("phase_config")) {
      const PhaseConfig pc = phase_config_from_json(c.metadata.at("phase_config"));
      opt.sampling = pc.sampling;
      opt.text_mode = pc.text_mode;
    }
    const int ph = phase_of(c);
    std::vector<TokenManipulation> all{TokenManipulation::kNormal};
    all.insert(all.end(), kinds.begin(), kinds.end());
    for (auto k : all) {
      const auto r = generation_ablation(t, k, opt);
      emit_report(r, {ph, ckpt_ab, ab.seed, to_string(k)}, ab.out, "ablation_" + to_string(k),
                  "generation, " + to_string(k) + " tokens");
    }
    json rows = json::array();
    for (const auto& r : nll_ablation(t, kinds, opt)) {
      rows.push_back(r.to_json());
      std::cout << "nll " << to_string(r.kind) << ": " << r.overall << " (pathology " << r.pathology << ", generic "
                << r.generic << ", delta " << 100.0 * r.d_overall << "%)\n";
    }
    write_text(fs::path(ab.out) / "ablation_nll.json",
               json{{"schema_version", kMetricsSchemaVersion}, {"checkpoint", ckpt_ab}, {"seed", ab.seed},
                    {"rows", rows}}.dump(2) + "\n");
    return kExitOk;
  }

  if (c_probe->parsed()) {
    const Benchmark b = load_benchmark(pr.data);
    auto m = GlabModel::from_checkpoint(load_checkpoint(ckpt_probe));
    Trainer t(*m, b, stderr_log(pr.quiet));
    std::vector<std::vector<double>> feats;
    std::vector<LabelVector> labels;
    for (std::size_t i = 0; i < b.val.size(); ++i) {
      const Tensor pooled = mean_rows(t.visual(Split::kVal, i));
      feats.emplace_back(pooled.data().begin(), pooled.data().end());
      labels.push_back(b.val[i].labels);
    }
    const ProbeResult r = linear_probe(feats, labels, ProbeOptions{.seed = pr.seed});
    const json j = {{"schema_version", kMetricsSchemaVersion}, {"checkpoint", ckpt_probe},
                    {"seed", pr.seed},                         {"macro_f1", r.macro_f1},
                    {"fold_f1", r.fold_f1},                    {"notes", r.notes}};
    fs::create_directories(pr.out);
    write_text(fs::path(pr.out) / "probe.json", j.dump(2) + "\n");
    std::ostringstream csv;
    csv << "fold,f1\n";
    for (std::size_t f = 0; f < r.fold_f1.size(); ++f) csv << f << ',' << r.fold_f1[f] << '\n';
    csv << "MEAN," << r.macro_f1 << '\n';
    write_text(fs::path(pr.out) / "probe.csv", csv.str());
    std::cout << "linear probe macro F1 " << r.macro_f1 << " over " << r.fold_f1.size() << " folds\n";
    for (const auto& n : r.notes) std::cout << "  " << n << '\n';
    return kExitOk;
  }

  if (c_wh->parsed()) {
    const Benchmark b = load_benchmark(wh.data);
    const Checkpoint c = load_checkpoint(ckpt_wh);
    auto m = GlabModel::from_checkpoint(c);
    Trainer t(*m, b, stderr_log(wh.quiet));
    if (fit) {
      const WhiteningTransform w = t.prepare_text_space();
      json meta = c.metadata;
      for (auto& [k, v] : m->metadata().items()) meta[k] = v;
      save_checkpoint(capture_checkpoint(m->store, nullptr, meta), wh.out);
      std::cout << "whitening D " << w.dim << ", variance retained " << w.variance_retained << " -> " << wh.out
                << '\n';
      return kExitOk;
    }
    std::vector<std::vector<std::size_t>> seqs;
    const std::size_t n = b.val.size();
    for (auto mode : {TextMode::kPositiveFindings, TextMode::kRawNarrative}) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto& e = t.report(Split::kVal, i, mode);
        std::vector<std::size_t> ids{b.tok.special().bos};
        ids.insert(ids.end(), e.ids.begin(), e.ids.end() - 1);
        seqs.push_back(std::move(ids));
      }
    }
    const Tensor emb = m->text_embeddings(seqs);
    std::vector<IndexPair> matched, mismatched;
    for (std::size_t i = 0; i < n; ++i) {
      matched.emplace_back(i, n + i);
      mismatched.emplace_back(i, n + (i + 1) % n);
    }
    const AnisotropyReport raw = anisotropy_report(emb, matched, mismatched, wh.seed);
    const AnisotropyReport white = anisotropy_report(m->whitening().apply_rows(emb), matched, mismatched, wh.seed);
    const json j = {{"raw", {{"mean_pairwise_cos", raw.mean_pairwise_cos}, {"d_prime", raw.d_prime}}},
                    {"whitened", {{"mean_pairwise_cos", white.mean_pairwise_cos}, {"d_prime", white.d_prime}}},
                    {"variance_retained", m->whitening().variance_retained}};
    fs::create_directories(wh.out);
    write_text(fs::path(wh.out) / "whitening_report.json", j.dump(2) + "\n");
    std::cout << "raw:      mean cos " << raw.mean_pairwise_cos << ", d' " << raw.d_prime << '\n'
              << "whitened: mean cos " << white.mean_pairwise_cos << ", d' " << white.d_prime << '\n';
    return kExitOk;
  }

  if (c_bt->parsed()) {
    const Checkpoint src = load_checkpoint(from);
    const Checkpoint dst = load_checkpoint(to);
    auto m = GlabModel::from_checkpoint(dst);
    const TransferReport rep = warm_bridge_transfer(m->store, src, dry);
    std::cout << rep.summary() << '\n' << rep.to_json().dump() << '\n';
    if (!dry) {
      json meta = dst.metadata;
      meta["transfer"] = rep.to_json();
      save_checkpoint(capture_checkpoint(m->store, nullptr, meta), bt.out.empty() ? to : bt.out);
    }
    return kExitOk;
  }
  return kExitConfig;
}

}  // namespace glab::cli

int main(int argc, char** argv) {
  try {
    return glab::cli::run(argc, argv);
  } catch (const glab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return glab::cli::kExitConfig;
  } catch (const glab::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return glab::cli::kExitCheckpoint;
  } catch (const glab::Error& e) {
    std::cerr << "contract violation: " << e.what() << '\n';
    return glab::cli::kExitContract;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return glab::cli::kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return glab::cli::kExitCheckpoint;
  }
}
