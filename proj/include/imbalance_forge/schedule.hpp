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
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imbalance_forge/errors.hpp"

namespace imbalance_forge {

enum class DecayKind { kExponential, kPolynomial };

struct ScheduleConfig {
  DecayKind kind = DecayKind::kExponential;
  double lr0 = 1e-4;
  double alpha = 0.98;
  double p = 0.9;
  int n = 50;
  // Epochs at which the base rate drops to restart_factor times the previous
  // base rate and the decay restarts from zero.
  std::vector<int> restart_epochs;
  double restart_factor = 0.65;

  void validate() const {
    if (!(lr0 > 0.0)) throw ValidationError("schedule.lr0 must be > 0");
    if (!(alpha > 0.0 && alpha < 1.0)) {
      throw ValidationError("schedule.alpha must lie in (0, 1)");
    }
    if (!(p > 0.0)) throw ValidationError("schedule.p must be > 0");
    if (n < 1) throw ValidationError("schedule.n must be >= 1");
    if (!(restart_factor > 0.0)) {
      throw ValidationError("schedule restart factor must be > 0");
    }
    int prev = 0;
    for (int e : restart_epochs) {
      if (e <= prev || e >= n) {
        throw ValidationError(
            "schedule.restarts must be strictly increasing within [1, n)");
      }
      prev = e;
    }
  }

  static ScheduleConfig from_json(const nlohmann::json& j) {
    ScheduleConfig cfg;
    const std::string kind = j.value("kind", std::string("exponential"));
    if (kind == "exponential") {
      cfg.kind = DecayKind::kExponential;
    } else if (kind == "polynomial") {
      cfg.kind = DecayKind::kPolynomial;
    } else {
      throw ValidationError("schedule.kind must be exponential or polynomial");
    }
    cfg.lr0 = j.value("lr0", cfg.lr0);
    cfg.alpha = j.value("alpha", cfg.alpha);
    cfg.p = j.value("p", cfg.p);
    cfg.n = j.value("n", cfg.n);
    cfg.restart_epochs = j.value("restarts", std::vector<int>{});
    cfg.restart_factor = j.value("restart_factor", cfg.restart_factor);
    cfg.validate();
    return cfg;
  }

  nlohmann::json to_json() const {
    return {{"kind", kind == DecayKind::kExponential ? "exponential" : "polynomial"},
            {"lr0", lr0},
            {"alpha", alpha},
            {"p", p},
            {"n", n},
            {"restarts", restart_epochs},
            {"restart_factor", restart_factor}};
  }
};

/// Learning rate for epoch i in [0, n].
///
/// Exponential: base * alpha^k, accumulated by repeated multiplication so
/// that lr(i + 1) == lr(i) * alpha holds bitwise within a segment.
/// Polynomial: base * (1 - k / len)^p where len is the segment length, so
/// the last segment reaches 0 at i = n.
/// k counts epochs since the most recent restart.
inline double lr_at(const ScheduleConfig& cfg, int epoch) {
  cfg.validate();
  if (epoch < 0 || epoch > cfg.n) {
    throw ValidationError("epoch " + std::to_string(epoch) +
                          " outside schedule range [0, " + std::to_string(cfg.n) +
                          "]");
  }
  double base = cfg.lr0;
  int start = 0;
  int end = cfg.n;
  for (int r : cfg.restart_epochs) {
    if (epoch >= r) {
      base *= cfg.restart_factor;
      start = r;
    } else {
      end = r;
      break;
    }
  }
  const int k = epoch - start;
  if (cfg.kind == DecayKind::kExponential) {
    double lr = base;
    for (int s = 0; s < k; ++s) lr *= cfg.alpha;
    return lr;
  }
  const double len = static_cast<double>(end - start);
  return base * std::pow(1.0 - static_cast<double>(k) / len, cfg.p);
}

}  // namespace imbalance_forge
