/* Copyright 2026 The imbalance-forge Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "imbalance_forge/imbalance_forge.hpp"

namespace imbalance_forge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

inline constexpr const char* kFormats = R"(File formats:
  manifest.jsonl   line 1: task JSON {"task","classes":[{"id","name","group"}]};
                   then one record per line {"id","width","height",
                   "pixel_counts":{"<class>":n}} (zero counts omitted)
  plan.jsonl       one {"epoch","record"} object per plan entry
  trace.jsonl      one {"step","probs","targets","records","ema"} per batch
  *.pgm            binary P5 label map, maxval 255, 255 = ignore
  *.bin            raw little-endian float32; header in the sidecar <blob>.json
  prob map .bin    shape [C,H,W] in the sidecar "shape" key
  metrics.csv      epoch,lr,train_loss,miou,anat_miou,tool_miou,rare_miou
  run.json         provenance: tool, version, subcommand, arguments, seed)";

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string log_level = "warn";
};

inline std::uint64_t seed_or(const Globals& g, std::uint64_t fallback) {
  return g.seed.value_or(fallback);
}

/// Directory receiving run.json: `out` itself when it is a directory output,
/// otherwise its parent.
inline fs::path run_dir(const fs::path& out, bool out_is_dir) {
  if (out.empty()) return fs::current_path();
  if (out_is_dir) return out;
  return out.has_parent_path() ? out.parent_path() : fs::current_path();
}

inline void write_run_record(const fs::path& dir, const std::string& subcommand,
                             const json& arguments, const Globals& g,
                             const json& config = nullptr) {
  json run = {{"tool", "imbalance-forge"},
              {"version", kVersion},
              {"subcommand", subcommand},
              {"arguments", arguments},
              {"seed", g.seed ? json(*g.seed) : json(nullptr)}};
  if (!config.is_null()) run["config"] = config;
  io::write_json(dir / "run.json", run);
}

// ---------------------------------------------------------------------------
// gen-synth
// ---------------------------------------------------------------------------

inline int gen_synth(const fs::path& config_path, const Globals& g) {
  if (g.out.empty()) throw ValidationError("gen-synth needs --out <dir>");
  json j = io::read_json(config_path);
  if (j.contains("synth")) j = j["synth"];
  SynthConfig cfg = SynthConfig::from_json(j);
  cfg.seed = seed_or(g, cfg.seed);
  const SynthDataset data = generate_dataset(cfg);
  save_dataset(g.out, data);
  io::write_json(fs::path(g.out) / "synth_config.json", cfg.to_json());
  spdlog::info("wrote {} records to {}", data.records.size(), g.out);
  write_run_record(g.out, "gen-synth", {{"config", config_path.string()}}, g,
                   cfg.to_json());
  return 0;
}

// ---------------------------------------------------------------------------
// plan-epoch
// ---------------------------------------------------------------------------

inline int plan_epoch(const fs::path& manifest_path, double t, int epochs,
                      const Globals& g) {
  if (g.out.empty()) throw ValidationError("plan-epoch needs --out <plan.jsonl>");
  if (epochs < 1) throw ValidationError("--epochs must be >= 1");
  const DatasetManifest m = load_manifest(manifest_path);
  const RepeatFactorConfig cfg{t, 20.0, seed_or(g, 0)};
  cfg.validate();
  const auto factors = image_repeat_factors(m, cfg);
  std::string text;
  for (int e = 0; e < epochs; ++e) {
    const EpochPlan plan = plan_from_repeat_factors(m, factors, cfg.seed, e);
    spdlog::info("epoch {}: {} entries", e, plan.order.size());
    text += plan_to_jsonl(plan);
  }
  io::write_text(g.out, text);
  write_run_record(run_dir(g.out, false), "plan-epoch",
                   {{"manifest", manifest_path.string()},
                    {"t", t},
                    {"epochs", epochs},
                    {"out", g.out}},
                   g);
  return 0;
}

// ---------------------------------------------------------------------------
// adaptive-sim
// ---------------------------------------------------------------------------

/// Simulated feedback: a class seen in k sampled records scores IoU
/// k / (k + half_life).
inline int adaptive_sim(const fs::path& manifest_path, int steps,
                        std::size_t batch_size, double half_life,
                        const Globals& g) {
  if (g.out.empty()) throw ValidationError("adaptive-sim needs --out <trace.jsonl>");
  if (steps < 1) throw ValidationError("--steps must be >= 1");
  if (!(half_life > 0.0)) throw ValidationError("--half-life must be positive");
  const DatasetManifest m = load_manifest(manifest_path);
  const std::uint64_t seed = seed_or(g, 0);
  const AdaptiveConfig cfg{batch_size, 10, seed};
  cfg.validate();
  AdaptiveStreams streams = AdaptiveStreams::from_seed(seed);
  IoUState state(m.num_classes());
  std::vector<double> exposure(m.num_classes(), 0.0);
  std::string text;
  for (int step = 0; step < steps; ++step) {
    const auto probs = adaptive_class_probs(state);
    const AdaptiveBatch batch = adaptive_batch(m, state, cfg, streams);
    std::vector<bool> present(m.num_classes(), false);
    std::vector<std::string> ids;
    for (std::size_t idx : batch.records) {
      const auto& rec = m.record(idx);
      ids.push_back(rec.record_id);
      for (std::size_t c = 0; c < m.num_classes(); ++c) {
        if (rec.pixel_counts[c] > 0) {
          exposure[c] += 1.0;
          present[c] = true;
        }
      }
    }
    std::map<int, double> observed;
    for (std::size_t c = 0; c < m.num_classes(); ++c) {
      if (present[c]) {
        observed[static_cast<int>(c)] = exposure[c] / (exposure[c] + half_life);
      }
    }
    state.update(observed);
    text += json{{"step", step},
                 {"probs", probs},
                 {"targets", batch.target_classes},
                 {"records", ids},
                 {"ema", state.ema()}}
                .dump();
    text += '\n';
  }
  io::write_text(g.out, text);
  write_run_record(run_dir(g.out, false), "adaptive-sim",
                   {{"manifest", manifest_path.string()},
                    {"steps", steps},
                    {"batch_size", batch_size},
                    {"half_life", half_life},
                    {"out", g.out}},
                   g);
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

struct LossInstance {
  Tensor logits;
  std::vector<std::uint8_t> labels;
  std::vector<std::size_t> image_pixels;
};

/// Smallest gap between sorted per-class Lovász errors; small gaps make the
/// sort order flip under finite-difference probes.
inline double lovasz_error_gap(const LossInstance& inst) {
  const Tensor p = softmax_rows(inst.logits);
  const std::size_t n = p.dim(0), c = p.dim(1);
  double gap = std::numeric_limits<double>::infinity();
  std::size_t begin = 0;
  for (std::size_t len : inst.image_pixels) {
    for (std::size_t k = 0; k < c; ++k) {
      std::vector<double> err;
      for (std::size_t i = begin; i < begin + len; ++i) {
        const double fg = inst.labels[i] == k ? 1.0 : 0.0;
        err.push_back(std::abs(fg - p(i, k)));
      }
      std::sort(err.begin(), err.end());
      for (std::size_t i = 1; i < err.size(); ++i) gap = std::min(gap, err[i] - err[i - 1]);
    }
    begin += len;
  }
  (void)n;
  return gap;
}

/// Smallest distance of a correct-class probability from the OHEM threshold.
inline double ohem_margin(const LossInstance& inst, double threshold) {
  const Tensor p = softmax_rows(inst.logits);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < inst.labels.size(); ++i) {
    margin = std::min(margin, std::abs(p(i, inst.labels[i]) - threshold));
  }
  return margin;
}

/// Random instance with N <= 64 pixels and C <= 5 classes, split into one or
/// two images, redrawn until no Lovász ties or OHEM threshold crossings lie
/// within reach of the probe step.
inline LossInstance draw_loss_instance(Rng& rng, LossKind loss, double eps) {
  for (;;) {
    const std::size_t c = 2 + rng.index(4);
    const std::size_t n = 2 + rng.index(63);
    LossInstance inst{Tensor({n, c}), std::vector<std::uint8_t>(n), {}};
    for (double& v : inst.logits.data()) v = 2.0 * rng.normal();
    for (auto& l : inst.labels) l = static_cast<std::uint8_t>(rng.index(c));
    if (n >= 4 && rng.bernoulli(0.5)) {
      const std::size_t first = 1 + rng.index(n - 1);
      inst.image_pixels = {first, n - first};
    } else {
      inst.image_pixels = {n};
    }
    const double guard = 1e3 * eps;
    if (loss == LossKind::kLovasz && lovasz_error_gap(inst) < guard) continue;
    if (loss == LossKind::kOhem && ohem_margin(inst, 0.7) < guard) continue;
    return inst;
  }
}

inline ScalarFunction loss_function(LossKind loss, const LossInstance& inst) {
  return [loss, &inst](const Tensor& z) {
    LossOutput out;
    switch (loss) {
      case LossKind::kCrossEntropy:
        out = cross_entropy(z, inst.labels);
        break;
      case LossKind::kOhem:
        out = ohem_cross_entropy(z, inst.labels, 0.7);
        break;
      case LossKind::kLovasz:
        out = lovasz_softmax_per_image(z, inst.labels, inst.image_pixels);
        break;
    }
    return ValueAndGrad{out.value, std::move(out.grad_logits)};
  };
}

/// Maximum relative error over `trials` random instances.
inline double grad_check_trials(LossKind loss, int trials, double eps,
                                std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "grad-check", {static_cast<std::uint64_t>(loss)});
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const LossInstance inst = draw_loss_instance(rng, loss, eps);
    worst = std::max(worst, grad_check(loss_function(loss, inst), inst.logits, eps));
  }
  return worst;
}

inline int grad_check_cmd(const std::string& loss_name, int trials, double eps,
                          double tolerance, const Globals& g) {
  if (trials < 1) throw ValidationError("--trials must be >= 1");
  if (!(eps > 0.0)) throw ValidationError("--eps must be positive");
  const LossKind loss = parse_loss(loss_name);
  const double worst = grad_check_trials(loss, trials, eps, seed_or(g, 0));
  const bool ok = worst < tolerance;
  std::cout << "loss=" << loss_name << " trials=" << trials
            << " max_rel_error=" << format_number(worst) << " tolerance="
            << format_number(tolerance) << (ok ? " ok" : " FAILED") << "\n";
  write_run_record(run_dir(g.out, true), "grad-check",
                   {{"loss", loss_name},
                    {"trials", trials},
                    {"eps", eps},
                    {"tolerance", tolerance},
                    {"max_rel_error", worst}},
                   g);
  return ok ? 0 : 2;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline int eval_cmd(const fs::path& pred_dir, const fs::path& gt_dir,
                    const fs::path& manifest_path, double rare_threshold,
                    const Globals& g) {
  if (g.out.empty()) throw ValidationError("eval needs --out <report.json>");
  const DatasetManifest m = load_manifest(manifest_path);
  ConfusionMatrix cm(m.num_classes());
  for (const auto& rec : m.records()) {
    const LabelMap pred = read_pgm(pred_dir / (rec.record_id + ".pgm"));
    const LabelMap gt = read_pgm(gt_dir / (rec.record_id + ".pgm"));
    if (static_cast<std::int64_t>(gt.height) != rec.height ||
        static_cast<std::int64_t>(gt.width) != rec.width) {
      throw ValidationError(rec.record_id + ": ground truth size differs from manifest");
    }
    cm.accumulate(pred, gt);
  }
  const IoUReport report =
      iou_report(cm, m.task(), rare_classes(m, rare_threshold));
  io::write_json(g.out, report.to_json());
  spdlog::info("miou {}", report.miou);
  write_run_record(run_dir(g.out, false), "eval",
                   {{"pred", pred_dir.string()},
                    {"gt", gt_dir.string()},
                    {"manifest", manifest_path.string()},
                    {"rare_threshold", rare_threshold},
                    {"out", g.out}},
                   g);
  return 0;
}

// ---------------------------------------------------------------------------
// ensemble
// ---------------------------------------------------------------------------

inline int ensemble_cmd(const std::vector<std::string>& inputs, const Globals& g) {
  if (g.out.empty()) throw ValidationError("ensemble needs --out <mean.bin>");
  std::vector<Tensor> maps;
  for (const auto& in : inputs) {
    Tensor map = read_prob_map(in);
    check_prob_map(map);
    maps.push_back(std::move(map));
  }
  const Tensor mean = ensemble_mean(maps);
  write_prob_map(g.out, mean);
  fs::path labels = g.out;
  labels.replace_extension(".pgm");
  write_pgm(labels, argmax_labels(mean));
  write_run_record(run_dir(g.out, false), "ensemble",
                   {{"inputs", inputs}, {"out", g.out}}, g);
  return 0;
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

/// "data" is either {"synth": <synth config>} generated with seeds.data, or
/// {"dir": <gen-synth output>} resolved against the config's directory.
inline SynthDataset load_training_data(const json& data, const fs::path& base,
                                       std::uint64_t data_seed) {
  if (data.contains("synth")) {
    SynthConfig sc = SynthConfig::from_json(data["synth"]);
    sc.seed = data_seed;
    return generate_dataset(sc);
  }
  if (data.contains("dir")) {
    fs::path dir = data["dir"].get<std::string>();
    if (dir.is_relative()) dir = base / dir;
    return load_dataset(dir);
  }
  throw ValidationError("training config 'data' needs 'synth' or 'dir'");
}

inline int train_toy(const fs::path& config_path, const Globals& g) {
  if (g.out.empty()) throw ValidationError("train-toy needs --out <dir>");
  const json raw = io::read_json(config_path);
  if (!raw.contains("data")) throw ValidationError("training config needs 'data'");
  TrainConfig cfg = TrainConfig::from_json(raw);
  if (g.seed) cfg.seeds = {*g.seed, *g.seed, *g.seed};
  const SynthDataset data =
      load_training_data(raw["data"], config_path.parent_path(), cfg.seeds.data);

  const fs::path out = g.out;
  fs::create_directories(out);
  json resolved = cfg.to_json();
  resolved["data"] = raw["data"];
  const std::string hash = config_hash(resolved);

  std::ofstream csv(out / "metrics.csv", std::ios::binary | std::ios::trunc);
  if (!csv) throw RuntimeError("cannot write " + (out / "metrics.csv").string());
  csv << metrics_csv_header() << std::flush;
  const TrainResult result = train(data, cfg, [&](const EpochLog& e) {
    csv << metrics_csv_row(e) << std::flush;
    spdlog::info("epoch {} lr {} miou {}", e.epoch, e.lr, e.report.miou);
  });
  csv.close();

  const json seeds = {{"data", cfg.seeds.data},
                      {"model", cfg.seeds.model},
                      {"sampler", cfg.seeds.sampler}};
  const auto& best = result.best();
  save_checkpoint(out / "model.bin", result.final_model,
                  {{"config_hash", hash}, {"seeds", seeds}, {"epoch", cfg.epochs}});
  save_checkpoint(out / "best_model.bin", result.best_model,
                  {{"config_hash", hash}, {"seeds", seeds}, {"epoch", best.epoch}});
  json rare = json::array();
  for (int c : result.rare_classes) rare.push_back(c);
  io::write_json(out / "summary.json",
                 {{"best_epoch", best.epoch},
                  {"best_miou", best.report.miou},
                  {"best_report", best.report.to_json()},
                  {"final_report", result.log.back().report.to_json()},
                  {"rare_classes", rare},
                  {"train_records", result.train_records},
                  {"val_records", result.val_records},
                  {"config_hash", hash}});
  write_run_record(out, "train-toy", {{"config", config_path.string()}}, g, resolved);
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(int argc, char** argv) {
  CLI::App app{"imbalance-forge: class-imbalance tooling for semantic segmentation"};
  app.footer(kFormats);
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Seed for every random stream");
  app.add_option("--out", g.out, "Output path (file or directory, per subcommand)");
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  std::string config, manifest, pred_dir, gt_dir, loss = "lovasz";
  double t = 0.15, eps = 1e-5, tolerance = 1e-4, half_life = 20.0, rare = 0.10;
  int epochs = 1, steps = 100, trials = 100;
  std::size_t batch_size = 8;
  std::vector<std::string> inputs;

  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic long-tail dataset");
  gen->add_option("--config", config, "Synth config JSON")->required()->check(CLI::ExistingFile);
  gen->footer("--out: dataset directory (labels/*.pgm, features/*.bin, manifest.jsonl)\n\n" +
              std::string(kFormats));

  auto* plan = app.add_subcommand("plan-epoch", "Write repeat-factor epoch plans");
  plan->add_option("--manifest", manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
  plan->add_option("--t", t, "Repeat-factor threshold")->capture_default_str();
  plan->add_option("--epochs", epochs, "Number of epochs")->capture_default_str();
  plan->footer("--out: plan.jsonl\n\n" + std::string(kFormats));

  auto* sim = app.add_subcommand("adaptive-sim", "Simulate adaptive batch composition");
  sim->add_option("--manifest", manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
  sim->add_option("--steps", steps, "Number of batches")->capture_default_str();
  sim->add_option("--batch-size", batch_size, "Slots per batch")->capture_default_str();
  sim->add_option("--half-life", half_life,
                  "Simulated IoU = k / (k + half-life) after k exposures")
      ->capture_default_str();
  sim->footer("--out: trace.jsonl\n\n" + std::string(kFormats));

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of loss gradients");
  gc->add_option("--loss", loss, "ce|ohem|lovasz")
      ->check(CLI::IsMember({"ce", "ohem", "lovasz"}))
      ->capture_default_str();
  gc->add_option("--trials", trials, "Random instances")->capture_default_str();
  gc->add_option("--eps", eps, "Central difference step")->capture_default_str();
  gc->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();
  gc->footer("--out: directory for run.json (default: current directory)\n\n" +
             std::string(kFormats));

  auto* ev = app.add_subcommand("eval", "IoU report from predicted and ground-truth label maps");
  ev->add_option("--pred", pred_dir, "Directory of <record_id>.pgm predictions")
      ->required()->check(CLI::ExistingDirectory);
  ev->add_option("--gt", gt_dir, "Directory of <record_id>.pgm ground truth")
      ->required()->check(CLI::ExistingDirectory);
  ev->add_option("--manifest", manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
  ev->add_option("--rare-threshold", rare, "Rare instrument frequency bound")
      ->capture_default_str();
  ev->footer("--out: report.json\n\n" + std::string(kFormats));

  auto* ens = app.add_subcommand("ensemble", "Mean of probability maps");
  ens->add_option("--inputs", inputs, "Probability map blobs")
      ->required()->expected(1, -1)->check(CLI::ExistingFile);
  ens->footer("--out: mean.bin (plus sidecar and argmax .pgm)\n\n" + std::string(kFormats));

  auto* tr = app.add_subcommand("train-toy", "Train the per-pixel toy model");
  tr->add_option("--config", config, "Training config JSON")->required()->check(CLI::ExistingFile);
  tr->footer("--out: run directory (metrics.csv, model.bin, best_model.bin, summary.json)\n"
             "--seed: overrides seeds.data, seeds.model and seeds.sampler\n\n" +
             std::string(kFormats));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }
  if (*seed_opt) g.seed = seed_value;

  spdlog::drop("imbalance-forge");
  spdlog::set_default_logger(spdlog::stderr_color_mt("imbalance-forge"));
  spdlog::set_level(spdlog::level::from_str(g.log_level));

  try {
    if (*gen) return gen_synth(config, g);
    if (*plan) return plan_epoch(manifest, t, epochs, g);
    if (*sim) return adaptive_sim(manifest, steps, batch_size, half_life, g);
    if (*gc) return grad_check_cmd(loss, trials, eps, tolerance, g);
    if (*ev) return eval_cmd(pred_dir, gt_dir, manifest, rare, g);
    if (*ens) return ensemble_cmd(inputs, g);
    if (*tr) return train_toy(config, g);
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 1;
}

}  // namespace imbalance_forge::cli
