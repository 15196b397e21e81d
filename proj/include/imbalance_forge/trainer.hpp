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

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "imbalance_forge/diffmath.hpp"
#include "imbalance_forge/errors.hpp"
#include "imbalance_forge/io.hpp"
#include "imbalance_forge/losses.hpp"
#include "imbalance_forge/manifest.hpp"
#include "imbalance_forge/metrics.hpp"
#include "imbalance_forge/parallel.hpp"
#include "imbalance_forge/rng.hpp"
#include "imbalance_forge/sampling.hpp"
#include "imbalance_forge/schedule.hpp"
#include "imbalance_forge/synth.hpp"

namespace imbalance_forge {

enum class SamplerKind { kUniform, kRepeatFactor, kAdaptive };
enum class LossKind { kCrossEntropy, kOhem, kLovasz };

inline std::string to_string(SamplerKind s) {
  switch (s) {
    case SamplerKind::kUniform:
      return "uniform";
    case SamplerKind::kRepeatFactor:
      return "repeat_factor";
    case SamplerKind::kAdaptive:
      return "adaptive";
  }
  return "uniform";
}

inline SamplerKind parse_sampler(const std::string& s) {
  if (s == "uniform") return SamplerKind::kUniform;
  if (s == "repeat_factor") return SamplerKind::kRepeatFactor;
  if (s == "adaptive") return SamplerKind::kAdaptive;
  throw ValidationError("sampler must be uniform, repeat_factor or adaptive");
}

inline std::string to_string(LossKind l) {
  switch (l) {
    case LossKind::kCrossEntropy:
      return "ce";
    case LossKind::kOhem:
      return "ohem";
    case LossKind::kLovasz:
      return "lovasz";
  }
  return "ce";
}

inline LossKind parse_loss(const std::string& s) {
  if (s == "ce") return LossKind::kCrossEntropy;
  if (s == "ohem") return LossKind::kOhem;
  if (s == "lovasz") return LossKind::kLovasz;
  throw ValidationError("loss must be ce, ohem or lovasz");
}

// ---------------------------------------------------------------------------
// Toy per-pixel classifier
// ---------------------------------------------------------------------------

struct ModelConfig {
  int stages = 2;  // 1: linear; 2: linear-tanh-linear
  std::size_t hidden = 32;
};

/// Per-pixel MLP: [N, F] features to [N, C] logits.
class ToyModel {
 public:
  struct Layer {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
  };

  ToyModel() = default;

  ToyModel(std::size_t input_dim, std::size_t num_classes,
           const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.stages != 1 && cfg.stages != 2) {
      throw ValidationError("model.stages must be 1 or 2");
    }
    if (cfg.stages == 2 && cfg.hidden == 0) {
      throw ValidationError("model.hidden must be positive");
    }
    std::vector<std::size_t> dims{input_dim};
    if (cfg.stages == 2) dims.push_back(cfg.hidden);
    dims.push_back(num_classes);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      Rng rng = Rng::stream(seed, "init", {l});
      // Glorot-uniform weights, zero bias.
      const double limit = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
      Tensor w({dims[l], dims[l + 1]});
      for (double& v : w.data()) v = rng.uniform(-limit, limit);
      layers_.push_back({std::move(w), Tensor({dims[l + 1]})});
    }
  }

  explicit ToyModel(std::vector<Layer> layers) : layers_(std::move(layers)) {
    if (layers_.empty() || layers_.size() > 2) {
      throw ValidationError("a toy model has one or two layers");
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      if (L.weight.rank() != 2 || L.bias.rank() != 1 ||
          L.weight.dim(1) != L.bias.dim(0) ||
          (l > 0 && layers_[l - 1].weight.dim(1) != L.weight.dim(0))) {
        throw ValidationError("inconsistent toy model layer shapes");
      }
    }
  }

  std::size_t input_dim() const { return layers_.front().weight.dim(0); }
  std::size_t num_classes() const { return layers_.back().weight.dim(1); }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  /// Parameters in a fixed order: W0, b0, W1, b1, ...
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> p;
    for (auto& L : layers_) {
      p.push_back(&L.weight);
      p.push_back(&L.bias);
    }
    return p;
  }

  /// Records the forward pass; `param_nodes` receives one node per
  /// parameter in parameters() order.
  NodeId forward(Tape& tape, const Tensor& x,
                 std::vector<NodeId>& param_nodes) const {
    param_nodes.clear();
    NodeId h = tape.leaf(x, false);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const NodeId w = tape.leaf(layers_[l].weight);
      const NodeId b = tape.leaf(layers_[l].bias);
      param_nodes.push_back(w);
      param_nodes.push_back(b);
      h = tape.linear(h, w, b);
      if (l + 1 < layers_.size()) h = tape.tanh(h);
    }
    return h;
  }

  Tensor logits(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = linear_forward(h, layers_[l].weight, layers_[l].bias);
      if (l + 1 < layers_.size()) {
        for (double& v : h.data()) v = std::tanh(v);
      }
    }
    return h;
  }

  /// Argmax label map for an [H, W, F] image.
  LabelMap predict(const Tensor& image) const {
    const std::size_t h = image.dim(0), w = image.dim(1);
    const Tensor z = logits(image.reshaped({h * w, image.dim(2)}));
    LabelMap out(h, w);
    for (std::size_t n = 0; n < h * w; ++n) {
      const auto row = z.row(n);
      out.pixels[n] = static_cast<std::uint8_t>(
          std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  }

 private:
  std::vector<Layer> layers_;
};

inline std::string config_hash(const nlohmann::json& j) {
  const std::uint64_t h = fnv1a64(j.dump());
  char buf[17];
  auto res = std::to_chars(buf, buf + 16, h, 16);
  return std::string(static_cast<std::size_t>(16 - (res.ptr - buf)), '0') +
         std::string(buf, res.ptr);
}

/// JSON sidecar with layer shapes plus `extra`, and the parameters as f32le
/// in parameters() order.
inline void save_checkpoint(const std::filesystem::path& path,
                            const ToyModel& model, nlohmann::json extra = {}) {
  nlohmann::json header = extra.is_object() ? extra : nlohmann::json::object();
  header["format"] = "imbalance-forge-checkpoint/1";
  header["activation"] = "tanh";
  header["layers"] = nlohmann::json::array();
  std::vector<double> blob;
  for (const auto& L : model.layers()) {
    header["layers"].push_back(
        {{"weight", L.weight.shape()}, {"bias", L.bias.shape()}});
    blob.insert(blob.end(), L.weight.data().begin(), L.weight.data().end());
    blob.insert(blob.end(), L.bias.data().begin(), L.bias.data().end());
  }
  io::write_f32le(path, blob, header);
}

inline ToyModel load_checkpoint(const std::filesystem::path& path) {
  auto blob = io::read_f32le(path);
  std::vector<ToyModel::Layer> layers;
  std::size_t offset = 0;
  auto take = [&](const Shape& shape) {
    const std::size_t n = shape_size(shape);
    if (offset + n > blob.values.size()) {
      throw ValidationError(path.string() + ": parameter blob too short");
    }
    std::vector<double> v(blob.values.begin() + static_cast<long>(offset),
                          blob.values.begin() + static_cast<long>(offset + n));
    offset += n;
    return Tensor(shape, std::move(v));
  };
  try {
    for (const auto& lj : blob.header.at("layers")) {
      Tensor w = take(lj.at("weight").get<Shape>());
      Tensor b = take(lj.at("bias").get<Shape>());
      layers.push_back({std::move(w), std::move(b)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": malformed checkpoint header: " +
                          e.what());
  }
  if (offset != blob.values.size()) {
    throw ValidationError(path.string() + ": parameter blob too long");
  }
  return ToyModel(std::move(layers));
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
            double lr) {
    if (m_.empty()) {
      for (const Tensor* p : params) {
        m_.push_back(Tensor::zeros_like(*p));
        v_.push_back(Tensor::zeros_like(*p));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m_[k][i] / c1, vhat = v_[k][i] / c2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct Seeds {
  std::uint64_t data = 0;
  std::uint64_t model = 0;
  std::uint64_t sampler = 0;
};

struct TrainConfig {
  SamplerKind sampler = SamplerKind::kUniform;
  LossKind loss = LossKind::kCrossEntropy;
  ScheduleConfig schedule;
  std::size_t batch_size = 8;
  int epochs = 50;
  AugmentConfig augment;
  Seeds seeds;
  ModelConfig model;
  AdamConfig adam;
  double ohem_threshold = 0.7;
  double repeat_threshold = 0.15;
  std::size_t candidates_per_slot = 10;
  double rare_threshold = 0.10;

  void validate() const {
    schedule.validate();
    if (batch_size == 0) throw ValidationError("batch_size must be positive");
    if (epochs < 0) throw ValidationError("epochs must be >= 0");
    if (epochs > 0 && schedule.n < epochs - 1) {
      throw ValidationError("schedule.n must cover every training epoch");
    }
    if (model.stages != 1 && model.stages != 2) {
      throw ValidationError("model.stages must be 1 or 2");
    }
    if (!(ohem_threshold > 0.0 && ohem_threshold <= 1.0)) {
      throw ValidationError("ohem_threshold must lie in (0, 1]");
    }
    RepeatFactorConfig{repeat_threshold}.validate();
    if (candidates_per_slot == 0) {
      throw ValidationError("candidates_per_slot must be positive");
    }
    if (!(rare_threshold > 0.0 && rare_threshold < 1.0)) {
      throw ValidationError("rare_threshold must lie in (0, 1)");
    }
  }

  /// Unknown keys are rejected so typos do not silently fall back to
  /// defaults. schedule.n defaults to `epochs`.
  static TrainConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "sampler", "loss", "schedule", "batch_size", "epochs", "augment",
        "seeds", "model", "adam", "ohem_threshold", "repeat_threshold",
        "candidates_per_slot", "rare_threshold", "data"};
    for (const auto& [key, _] : j.items()) {
      if (!known.count(key)) {
        throw ValidationError("unknown training config key '" + key + "'");
      }
    }
    try {
      TrainConfig c;
      c.sampler = parse_sampler(j.value("sampler", std::string("uniform")));
      c.loss = parse_loss(j.value("loss", std::string("ce")));
      c.batch_size = j.value("batch_size", c.batch_size);
      c.epochs = j.value("epochs", c.epochs);
      nlohmann::json sched = j.value("schedule", nlohmann::json::object());
      if (!sched.contains("n")) sched["n"] = std::max(1, c.epochs);
      c.schedule = ScheduleConfig::from_json(sched);
      if (j.contains("augment")) c.augment = AugmentConfig::from_json(j["augment"]);
      if (j.contains("seeds")) {
        const auto& s = j["seeds"];
        c.seeds.data = s.value("data", std::uint64_t{0});
        c.seeds.model = s.value("model", std::uint64_t{0});
        c.seeds.sampler = s.value("sampler", std::uint64_t{0});
      }
      if (j.contains("model")) {
        c.model.stages = j["model"].value("stages", c.model.stages);
        c.model.hidden = j["model"].value("hidden", c.model.hidden);
      }
      if (j.contains("adam")) {
        c.adam.beta1 = j["adam"].value("beta1", c.adam.beta1);
        c.adam.beta2 = j["adam"].value("beta2", c.adam.beta2);
        c.adam.eps = j["adam"].value("eps", c.adam.eps);
      }
      c.ohem_threshold = j.value("ohem_threshold", c.ohem_threshold);
      c.repeat_threshold = j.value("repeat_threshold", c.repeat_threshold);
      c.candidates_per_slot = j.value("candidates_per_slot", c.candidates_per_slot);
      c.rare_threshold = j.value("rare_threshold", c.rare_threshold);
      c.validate();
      return c;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed training config: ") + e.what());
    }
  }

  nlohmann::json to_json() const {
    return {{"sampler", to_string(sampler)},
            {"loss", to_string(loss)},
            {"schedule", schedule.to_json()},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"augment", augment.to_json()},
            {"seeds",
             {{"data", seeds.data}, {"model", seeds.model}, {"sampler", seeds.sampler}}},
            {"model", {{"stages", model.stages}, {"hidden", model.hidden}}},
            {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
            {"ohem_threshold", ohem_threshold},
            {"repeat_threshold", repeat_threshold},
            {"candidates_per_slot", candidates_per_slot},
            {"rare_threshold", rare_threshold}};
  }
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Deterministic 80/20 split on the record id hash.
inline bool is_validation_record(const std::string& record_id) {
  return fnv1a64(record_id) % 5 == 0;
}

/// Accumulates predict(record) against each record's labels into one
/// confusion matrix. Images are spread over worker_count() threads; integer
/// merges make the result independent of the split.
template <typename Predictor>
IoUReport evaluate(const Predictor& predict,
                   const std::vector<const SynthRecord*>& records,
                   const TaskSpec& task, const std::set<int>& rare) {
  if (records.empty()) throw ValidationError("evaluation set is empty");
  const std::size_t workers = std::min(worker_count(), records.size());
  std::vector<ConfusionMatrix> partial(workers, ConfusionMatrix(task.num_classes()));
  parallel_chunks(records.size(), workers,
                  [&](std::size_t begin, std::size_t end, std::size_t w) {
                    for (std::size_t i = begin; i < end; ++i) {
                      const LabelMap pred = predict(*records[i]);
                      partial[w].accumulate(pred, records[i]->labels);
                    }
                  });
  ConfusionMatrix cm(task.num_classes());
  for (const auto& p : partial) cm.merge(p);
  return iou_report(cm, task, rare);
}

inline IoUReport evaluate(const ToyModel& model,
                          const std::vector<const SynthRecord*>& records,
                          const TaskSpec& task, const std::set<int>& rare) {
  return evaluate([&](const SynthRecord& r) { return model.predict(r.features); },
                  records, task, rare);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;  // 0 is the evaluation before any training
  double lr = 0.0;
  std::optional<double> train_loss;
  IoUReport report;
};

inline std::string format_number(std::optional<double> v) {
  if (!v) return "";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, *v);
  return std::string(buf, res.ptr);
}

inline const char* metrics_csv_header() {
  return "epoch,lr,train_loss,miou,anat_miou,tool_miou,rare_miou\n";
}

inline std::string metrics_csv_row(const EpochLog& e) {
  return std::to_string(e.epoch) + "," + format_number(e.lr) + "," +
         format_number(e.train_loss) + "," + format_number(e.report.miou) + "," +
         format_number(e.report.groups.anatomies) + "," +
         format_number(e.report.groups.instruments) + "," +
         format_number(e.report.groups.rare) + "\n";
}

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_index = 0;  // into log, by validation mIoU
  ToyModel final_model;
  ToyModel best_model;
  std::set<int> rare_classes;
  std::size_t train_records = 0;
  std::size_t val_records = 0;

  const EpochLog& best() const { return log.at(best_index); }
};

using EpochCallback = std::function<void(const EpochLog&)>;

struct Batch {
  Tensor features;  // [pixels, F]
  std::vector<std::uint8_t> labels;
  std::vector<std::size_t> image_pixels;
};

inline Batch assemble_batch(const std::vector<const SynthRecord*>& records,
                            const AugmentConfig& aug, Rng& rng) {
  std::size_t total = 0;
  for (const auto* r : records) total += r->labels.size();
  const std::size_t f = records.front()->features.dim(2);
  Batch b;
  std::vector<double> feats;
  feats.reserve(total * f);
  b.labels.reserve(total);
  for (const auto* r : records) {
    if (aug.hflip || aug.blur || aug.color_jitter) {
      auto [img, lab] = augment(r->features, r->labels, aug, rng);
      feats.insert(feats.end(), img.data().begin(), img.data().end());
      b.labels.insert(b.labels.end(), lab.pixels.begin(), lab.pixels.end());
    } else {
      feats.insert(feats.end(), r->features.data().begin(), r->features.data().end());
      b.labels.insert(b.labels.end(), r->labels.pixels.begin(), r->labels.pixels.end());
    }
    b.image_pixels.push_back(r->labels.size());
  }
  b.features = Tensor({total, f}, std::move(feats));
  return b;
}

/// Trains a ToyModel on the record-hash training split and evaluates on the
/// held-out split after every epoch. Bitwise deterministic given cfg.seeds.
inline TrainResult train(const SynthDataset& data, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const TaskSpec& task = data.manifest.task();
  std::vector<const SynthRecord*> train_recs, val_recs;
  std::vector<RecordStats> train_stats;
  for (const auto& r : data.records) {
    if (is_validation_record(r.stats.record_id)) {
      val_recs.push_back(&r);
    } else {
      train_recs.push_back(&r);
      train_stats.push_back(r.stats);
    }
  }
  if (train_recs.empty() || val_recs.empty()) {
    throw ValidationError("dataset too small for an 80/20 record split");
  }
  const DatasetManifest train_manifest(task, std::move(train_stats));
  const std::size_t feature_dim = train_recs.front()->features.dim(2);
  if (cfg.augment.color_jitter && feature_dim != 3) {
    throw ValidationError("color jitter needs three feature channels");
  }

  TrainResult result;
  result.rare_classes = rare_classes(train_manifest, cfg.rare_threshold);
  result.train_records = train_recs.size();
  result.val_records = val_recs.size();

  ToyModel model(feature_dim, task.num_classes(), cfg.model, cfg.seeds.model);
  Adam adam(cfg.adam);

  auto record_epoch = [&](EpochLog entry) {
    entry.report = evaluate(model, val_recs, task, result.rare_classes);
    if (result.log.empty() || entry.report.miou > result.best().report.miou) {
      result.best_index = result.log.size();
      result.best_model = model;
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(result.log.back());
  };
  record_epoch(EpochLog{0, lr_at(cfg.schedule, 0), std::nullopt, {}});

  const RepeatFactorConfig rf_cfg{cfg.repeat_threshold, 20.0, cfg.seeds.sampler};
  const std::vector<double> image_factors =
      cfg.sampler == SamplerKind::kRepeatFactor
          ? image_repeat_factors(train_manifest, rf_cfg)
          : std::vector<double>{};
  const AdaptiveConfig adaptive_cfg{cfg.batch_size, cfg.candidates_per_slot,
                                    cfg.seeds.sampler};
  AdaptiveStreams streams = AdaptiveStreams::from_seed(cfg.seeds.sampler);
  IoUState iou_state(task.num_classes());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(cfg.schedule, epoch);
    std::vector<std::vector<std::size_t>> batches;
    if (cfg.sampler == SamplerKind::kAdaptive) {
      // Composed lazily below: each batch depends on the updated IoU state.
      const std::size_t count =
          (train_recs.size() + cfg.batch_size - 1) / cfg.batch_size;
      batches.resize(count);
    } else {
      const EpochPlan plan =
          cfg.sampler == SamplerKind::kRepeatFactor
              ? plan_from_repeat_factors(train_manifest, image_factors,
                                         cfg.seeds.sampler, epoch)
              : uniform_epoch(train_manifest, cfg.seeds.sampler, epoch);
      for (std::size_t i = 0; i < plan.order.size(); i += cfg.batch_size) {
        const auto end = std::min(plan.order.size(), i + cfg.batch_size);
        batches.emplace_back(plan.order.begin() + static_cast<long>(i),
                             plan.order.begin() + static_cast<long>(end));
      }
    }

    double loss_sum = 0.0;
    for (std::size_t step = 0; step < batches.size(); ++step) {
      if (cfg.sampler == SamplerKind::kAdaptive) {
        batches[step] =
            adaptive_batch(train_manifest, iou_state, adaptive_cfg, streams).records;
      }
      std::vector<const SynthRecord*> members;
      for (std::size_t idx : batches[step]) members.push_back(train_recs[idx]);
      Rng aug_rng = Rng::stream(cfg.seeds.data, "augment",
                                {static_cast<std::uint64_t>(epoch), step});
      const Batch batch = assemble_batch(members, cfg.augment, aug_rng);

      Tape tape;
      std::vector<NodeId> param_nodes;
      const NodeId logits = model.forward(tape, batch.features, param_nodes);
      const Tensor& z = tape.value(logits);
      LossOutput loss;
      switch (cfg.loss) {
        case LossKind::kCrossEntropy:
          loss = cross_entropy(z, batch.labels);
          break;
        case LossKind::kOhem:
          loss = ohem_cross_entropy(z, batch.labels, cfg.ohem_threshold);
          break;
        case LossKind::kLovasz:
          loss = lovasz_softmax_per_image(z, batch.labels, batch.image_pixels);
          break;
      }
      if (!std::isfinite(loss.value) || !loss.grad_logits.all_finite()) {
        throw RuntimeError("non-finite loss at epoch " + std::to_string(epoch + 1) +
                           " step " + std::to_string(step));
      }
      loss_sum += loss.value;
      tape.backward(logits, loss.grad_logits);
      std::vector<Tensor> grads;
      for (NodeId id : param_nodes) grads.push_back(tape.grad(id));
      adam.step(model.parameters(), grads, lr);

      if (cfg.sampler == SamplerKind::kAdaptive) {
        ConfusionMatrix cm(task.num_classes());
        std::vector<std::uint8_t> pred(batch.labels.size());
        for (std::size_t n = 0; n < pred.size(); ++n) {
          const auto row = z.row(n);
          pred[n] = static_cast<std::uint8_t>(
              std::max_element(row.begin(), row.end()) - row.begin());
        }
        cm.accumulate(pred, batch.labels);
        std::map<int, double> observed;
        for (std::size_t c = 0; c < task.num_classes(); ++c) {
          std::int64_t gt_pixels = 0;
          for (std::size_t p = 0; p < task.num_classes(); ++p) gt_pixels += cm(c, p);
          if (gt_pixels > 0) observed[static_cast<int>(c)] = *cm.iou(c);
        }
        iou_state.update(observed);
      }
    }
    record_epoch(EpochLog{epoch + 1, lr,
                          loss_sum / static_cast<double>(batches.size()), {}});
  }
  result.final_model = model;
  return result;
}

}  // namespace imbalance_forge
