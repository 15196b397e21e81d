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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imbalance_forge/errors.hpp"
#include "imbalance_forge/manifest.hpp"
#include "imbalance_forge/rng.hpp"

namespace imbalance_forge {

// ---------------------------------------------------------------------------
// Repeat factor sampling
// ---------------------------------------------------------------------------

struct RepeatFactorConfig {
  double t = 0.15;
  // r_c used for classes that never occur (f_c = 0).
  double absent_class_cap = 20.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(t > 0.0 && t <= 1.0)) {
      throw ValidationError("repeat factor threshold t must lie in (0, 1]");
    }
    if (!(absent_class_cap >= 1.0)) {
      throw ValidationError("absent-class repeat cap must be >= 1");
    }
  }
};

/// r_c = max(1, sqrt(t / f_c)); f_c = 0 yields `cap`.
inline double class_repeat_factor(double f_c, double t, double cap = 20.0) {
  if (!(t > 0.0 && t <= 1.0)) {
    throw ValidationError("repeat factor threshold t must lie in (0, 1]");
  }
  if (!(f_c >= 0.0 && f_c <= 1.0)) {
    throw ValidationError("class frequency must lie in [0, 1]");
  }
  if (f_c == 0.0) return cap;
  return std::max(1.0, std::sqrt(t / f_c));
}

inline std::vector<double> class_repeat_factors(const DatasetManifest& m,
                                                const RepeatFactorConfig& cfg) {
  cfg.validate();
  std::vector<double> r;
  for (double f : class_frequencies(m)) {
    r.push_back(class_repeat_factor(f, cfg.t, cfg.absent_class_cap));
  }
  return r;
}

/// r_I = max over classes present in the record of r_c.
inline double image_repeat_factor(const RecordStats& record,
                                  std::span<const double> class_factors) {
  double r = 0.0;
  bool any = false;
  for (std::size_t c = 0; c < record.pixel_counts.size(); ++c) {
    if (record.pixel_counts[c] > 0) {
      r = std::max(r, class_factors[c]);
      any = true;
    }
  }
  if (!any) {
    throw ValidationError("record '" + record.record_id +
                          "' has no labelled pixels");
  }
  return r;
}

struct EpochPlan {
  int epoch_index = 0;
  // Manifest indices in traversal order, with repetition.
  std::vector<std::size_t> order;
  std::vector<std::string> entries;
  std::map<std::string, double> source_repeat_factors;
};

/// Each record i is emitted floor(r_I) times plus once more with probability
/// frac(r_I), rounding draws taken in manifest order, and the result is
/// shuffled. Deterministic in (seed, epoch_index).
inline EpochPlan plan_from_repeat_factors(const DatasetManifest& m,
                                          std::span<const double> image_factors,
                                          std::uint64_t seed, int epoch_index) {
  if (image_factors.size() != m.size()) {
    throw ValidationError("one repeat factor per record is required");
  }
  Rng rng = Rng::stream(seed, "plan", {static_cast<std::uint64_t>(epoch_index)});
  EpochPlan plan;
  plan.epoch_index = epoch_index;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double r = image_factors[i];
    if (!(r >= 1.0) || !std::isfinite(r)) {
      throw ValidationError("image repeat factor must be finite and >= 1");
    }
    const double whole = std::floor(r);
    auto copies = static_cast<std::size_t>(whole);
    if (rng.uniform() < r - whole) ++copies;
    plan.order.insert(plan.order.end(), copies, i);
    plan.source_repeat_factors[m.record(i).record_id] = r;
  }
  rng.shuffle(std::span<std::size_t>(plan.order));
  plan.entries.reserve(plan.order.size());
  for (std::size_t i : plan.order) plan.entries.push_back(m.record(i).record_id);
  return plan;
}

/// Repeat factor per record. Records without labelled pixels get 1.
inline std::vector<double> image_repeat_factors(const DatasetManifest& m,
                                                const RepeatFactorConfig& cfg) {
  const auto rc = class_repeat_factors(m, cfg);
  std::vector<double> r;
  r.reserve(m.size());
  for (const auto& rec : m.records()) {
    r.push_back(rec.labelled_pixels() > 0 ? image_repeat_factor(rec, rc) : 1.0);
  }
  return r;
}

inline EpochPlan build_epoch_plan(const DatasetManifest& m,
                                  const RepeatFactorConfig& cfg,
                                  int epoch_index) {
  return plan_from_repeat_factors(m, image_repeat_factors(m, cfg), cfg.seed,
                                  epoch_index);
}

/// One shuffled pass over all records.
inline EpochPlan uniform_epoch(const DatasetManifest& m, std::uint64_t seed,
                               int epoch_index) {
  const std::vector<double> ones(m.size(), 1.0);
  return plan_from_repeat_factors(m, ones, seed, epoch_index);
}

inline std::string plan_to_jsonl(const EpochPlan& plan) {
  std::string out;
  for (const auto& id : plan.entries) {
    out += nlohmann::json{{"epoch", plan.epoch_index}, {"record", id}}.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive sampling
// ---------------------------------------------------------------------------

/// Per-class exponentially smoothed IoU.
class IoUState {
 public:
  IoUState() = default;
  explicit IoUState(std::size_t num_classes, double smoothing = 0.1,
                    double init = 0.5)
      : ema_(num_classes, init), smoothing_(smoothing), init_(init) {
    if (num_classes == 0) throw ValidationError("IoUState needs classes");
    if (!(smoothing > 0.0 && smoothing <= 1.0)) {
      throw ValidationError("EMA smoothing must lie in (0, 1]");
    }
    if (!(init >= 0.0 && init <= 1.0)) {
      throw ValidationError("EMA init must lie in [0, 1]");
    }
  }

  std::span<const double> ema() const { return ema_; }
  double ema(std::size_t c) const { return ema_.at(c); }
  double smoothing() const { return smoothing_; }
  double init() const { return init_; }
  std::uint64_t steps() const { return steps_; }
  std::size_t num_classes() const { return ema_.size(); }

  /// ema <- (1 - s) * ema + s * observed for each observed class.
  void update(const std::map<int, double>& observed) {
    for (const auto& [c, v] : observed) {
      if (c < 0 || static_cast<std::size_t>(c) >= ema_.size()) {
        throw ValidationError("IoU observation for unknown class " +
                              std::to_string(c));
      }
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ValidationError("observed IoU must lie in [0, 1]");
      }
    }
    for (const auto& [c, v] : observed) {
      auto& e = ema_[static_cast<std::size_t>(c)];
      e = (1.0 - smoothing_) * e + smoothing_ * v;
    }
    ++steps_;
  }

  /// Direct assignment, for tests and checkpoint restore.
  void set(std::size_t c, double value) {
    if (!(value >= 0.0 && value <= 1.0)) {
      throw ValidationError("EMA values must lie in [0, 1]");
    }
    ema_.at(c) = value;
  }

  nlohmann::json to_json() const {
    nlohmann::json ema = nlohmann::json::object();
    for (std::size_t c = 0; c < ema_.size(); ++c) {
      ema[std::to_string(c)] = ema_[c];
    }
    return {{"ema", ema},
            {"smoothing", smoothing_},
            {"init", init_},
            {"steps", steps_}};
  }

  static IoUState from_json(const nlohmann::json& j) {
    try {
      const auto& ema = j.at("ema");
      IoUState s(ema.size(), j.at("smoothing").get<double>(),
                 j.value("init", 0.5));
      for (const auto& [key, value] : ema.items()) {
        const long c = parse_class_key(key);
        if (c < 0 || static_cast<std::size_t>(c) >= s.ema_.size()) {
          throw ValidationError("IoU state class ids must be contiguous");
        }
        s.set(static_cast<std::size_t>(c), value.get<double>());
      }
      s.steps_ = j.value("steps", std::uint64_t{0});
      return s;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed IoU state: ") + e.what());
    }
  }

 private:
  std::vector<double> ema_;
  double smoothing_ = 0.1;
  double init_ = 0.5;
  std::uint64_t steps_ = 0;
};

/// Functional form of IoUState::update.
inline IoUState update_iou_ema(IoUState state,
                               const std::map<int, double>& observed) {
  state.update(observed);
  return state;
}

/// p = softmax(1 - ema^2).
inline std::vector<double> adaptive_class_probs(const IoUState& state) {
  const auto ema = state.ema();
  std::vector<double> score(ema.size());
  for (std::size_t c = 0; c < ema.size(); ++c) score[c] = 1.0 - ema[c] * ema[c];
  const double m = *std::max_element(score.begin(), score.end());
  double z = 0.0;
  for (double& s : score) {
    s = std::exp(s - m);
    z += s;
  }
  for (double& s : score) s /= z;
  return score;
}

struct AdaptiveConfig {
  std::size_t batch_size = 8;
  std::size_t candidates_per_slot = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (candidates_per_slot < 1) {
      throw ValidationError("candidates_per_slot must be >= 1");
    }
  }
};

/// Independent substreams for slot targets and candidate draws.
struct AdaptiveStreams {
  Rng slots;
  Rng candidates;

  static AdaptiveStreams from_seed(std::uint64_t seed) {
    return {Rng::stream(seed, "slots"), Rng::stream(seed, "candidates")};
  }
};

/// Candidate with the most pixels of `target`; ties go to the smallest
/// manifest index.
inline std::size_t select_max_pixel(const DatasetManifest& m,
                                    std::span<const std::size_t> candidates,
                                    std::size_t target) {
  if (candidates.empty()) throw ValidationError("no candidates to select from");
  std::size_t best = candidates[0];
  for (std::size_t idx : candidates) {
    const auto count = m.record(idx).pixel_counts.at(target);
    const auto best_count = m.record(best).pixel_counts.at(target);
    if (count > best_count || (count == best_count && idx < best)) best = idx;
  }
  return best;
}

struct AdaptiveBatch {
  std::vector<int> target_classes;
  std::vector<std::size_t> records;  // manifest indices
};

/// Draws batch_size class targets from adaptive_class_probs(state); each slot
/// takes the max-pixel record among candidates_per_slot uniform draws (with
/// replacement) from the whole manifest.
inline AdaptiveBatch adaptive_batch(const DatasetManifest& m,
                                    const IoUState& state,
                                    const AdaptiveConfig& cfg,
                                    AdaptiveStreams& streams) {
  cfg.validate();
  if (state.num_classes() != m.num_classes()) {
    throw ValidationError("IoU state does not cover the task classes");
  }
  const auto probs = adaptive_class_probs(state);
  AdaptiveBatch batch;
  std::vector<std::size_t> candidates(cfg.candidates_per_slot);
  for (std::size_t slot = 0; slot < cfg.batch_size; ++slot) {
    const std::size_t target = streams.slots.categorical(probs);
    for (auto& c : candidates) c = streams.candidates.index(m.size());
    batch.target_classes.push_back(static_cast<int>(target));
    batch.records.push_back(select_max_pixel(m, candidates, target));
  }
  return batch;
}

}  // namespace imbalance_forge
