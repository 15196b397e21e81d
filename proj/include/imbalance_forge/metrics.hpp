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
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imbalance_forge/errors.hpp"
#include "imbalance_forge/io.hpp"
#include "imbalance_forge/label_map.hpp"
#include "imbalance_forge/manifest.hpp"
#include "imbalance_forge/tensor.hpp"

namespace imbalance_forge {

/// counts[g][p]: pixels with ground truth g predicted as p.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t num_classes)
      : n_(num_classes), counts_(num_classes * num_classes, 0) {}

  std::size_t num_classes() const { return n_; }
  std::int64_t operator()(std::size_t gt, std::size_t pred) const {
    return counts_[gt * n_ + pred];
  }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// Ignore pixels in gt are skipped; every other value must be a class id.
  void accumulate(std::span<const std::uint8_t> pred,
                  std::span<const std::uint8_t> gt) {
    if (pred.size() != gt.size()) {
      throw ValidationError("prediction and ground truth sizes differ");
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == kIgnoreLabel) continue;
      if (gt[i] >= n_ || pred[i] >= n_) {
        throw ValidationError("class value " +
                              std::to_string(gt[i] >= n_ ? gt[i] : pred[i]) +
                              " outside " + std::to_string(n_) + " classes");
      }
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == kIgnoreLabel) continue;
      ++counts_[gt[i] * n_ + pred[i]];
    }
  }

  void accumulate(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
      throw ValidationError("prediction and ground truth dimensions differ");
    }
    accumulate(std::span<const std::uint8_t>(pred.pixels),
               std::span<const std::uint8_t>(gt.pixels));
  }

  void merge(const ConfusionMatrix& other) {
    if (other.n_ != n_) throw ValidationError("confusion matrix sizes differ");
    for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
  }

  /// TP / (TP + FP + FN), or nullopt when the class is absent from both.
  std::optional<double> iou(std::size_t c) const {
    std::int64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n_; ++k) {
      row += (*this)(c, k);
      col += (*this)(k, c);
    }
    const std::int64_t tp = (*this)(c, c);
    const std::int64_t denom = row + col - tp;
    if (denom <= 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(denom);
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::int64_t> counts_;
};

/// Functional accumulate for callers that keep matrices as values.
inline ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& pred,
                                  const LabelMap& gt) {
  cm.accumulate(pred, gt);
  return cm;
}

struct GroupMeans {
  std::optional<double> anatomies;
  std::optional<double> instruments;
  std::optional<double> rare;
};

struct IoUReport {
  std::vector<std::optional<double>> per_class;
  double miou = 0.0;
  GroupMeans groups;
  std::vector<int> undefined_classes;

  nlohmann::json to_json() const {
    using nlohmann::json;
    auto opt = [](const std::optional<double>& v) -> json {
      return v ? json(*v) : json(nullptr);
    };
    json pc = json::object();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      pc[std::to_string(c)] = opt(per_class[c]);
    }
    return {{"per_class", pc},
            {"miou", miou},
            {"groups",
             {{"anatomies", opt(groups.anatomies)},
              {"instruments", opt(groups.instruments)},
              {"rare", opt(groups.rare)}}},
            {"undefined_classes", undefined_classes}};
  }
};

namespace detail {
inline std::optional<double> mean_defined(
    const std::vector<std::optional<double>>& per_class,
    const std::vector<int>& ids) {
  double sum = 0.0;
  std::size_t n = 0;
  for (int id : ids) {
    const auto& v = per_class.at(static_cast<std::size_t>(id));
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}
}  // namespace detail

/// Dataset-level IoU. Classes absent from both prediction and ground truth
/// are undefined and excluded from every mean.
inline IoUReport iou_report(const ConfusionMatrix& cm, const TaskSpec& task,
                            const std::set<int>& rare) {
  if (cm.num_classes() != task.num_classes()) {
    throw ValidationError("confusion matrix does not match the task");
  }
  IoUReport report;
  std::vector<int> all;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    report.per_class.push_back(cm.iou(c));
    if (!report.per_class.back()) {
      report.undefined_classes.push_back(static_cast<int>(c));
    }
    all.push_back(static_cast<int>(c));
  }
  const auto miou = detail::mean_defined(report.per_class, all);
  if (!miou) throw ValidationError("every class is undefined; nothing to report");
  report.miou = *miou;
  report.groups.anatomies = detail::mean_defined(
      report.per_class, task.ids_in_group(ClassGroup::kAnatomy));
  report.groups.instruments = detail::mean_defined(
      report.per_class, task.ids_in_group(ClassGroup::kInstrument));
  report.groups.rare = detail::mean_defined(
      report.per_class, std::vector<int>(rare.begin(), rare.end()));
  return report;
}

// ---------------------------------------------------------------------------
// Probability maps
// ---------------------------------------------------------------------------

/// Validates a [C, H, W] probability map: every pixel's class vector sums to
/// one within `tol`.
inline void check_prob_map(const Tensor& map, double tol = 1e-6) {
  if (map.rank() != 3) {
    throw ValidationError("probability map must be [C,H,W], got " +
                          shape_string(map.shape()));
  }
  const std::size_t classes = map.dim(0), plane = map.dim(1) * map.dim(2);
  for (std::size_t i = 0; i < plane; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += map[c * plane + i];
    if (std::abs(s - 1.0) > tol) {
      throw ValidationError("probability map pixel " + std::to_string(i) +
                            " sums to " + std::to_string(s));
    }
  }
}

/// Pixelwise arithmetic mean of probability maps.
inline Tensor ensemble_mean(const std::vector<Tensor>& maps) {
  if (maps.empty()) throw ValidationError("ensemble needs at least one map");
  for (const auto& m : maps) {
    if (m.shape() != maps.front().shape()) {
      throw ValidationError("ensemble inputs have different shapes: " +
                            shape_string(m.shape()) + " vs " +
                            shape_string(maps.front().shape()));
    }
    check_prob_map(m);
  }
  Tensor out = Tensor::zeros_like(maps.front());
  for (const auto& m : maps) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += m[k];
  }
  const double inv = 1.0 / static_cast<double>(maps.size());
  for (double& v : out.data()) v *= inv;
  return out;
}

/// Per-pixel argmax of a [C, H, W] map; ties go to the lower class id.
inline LabelMap argmax_labels(const Tensor& map) {
  if (map.rank() != 3) throw ValidationError("probability map must be [C,H,W]");
  const std::size_t classes = map.dim(0), h = map.dim(1), w = map.dim(2);
  LabelMap out(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (map[c * h * w + i] > map[best * h * w + i]) best = c;
    }
    out.pixels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

inline void write_prob_map(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() != 3) throw ValidationError("probability map must be [C,H,W]");
  io::write_f32le(path, map.data(), {{"shape", map.shape()}});
}

inline Tensor read_prob_map(const std::filesystem::path& path) {
  auto blob = io::read_f32le(path);
  Shape shape;
  try {
    shape = blob.header.at("shape").get<Shape>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": sidecar lacks shape: " + e.what());
  }
  if (shape.size() != 3) {
    throw ValidationError(path.string() + ": probability map must be [C,H,W]");
  }
  return Tensor(std::move(shape), std::move(blob.values));
}

}  // namespace imbalance_forge
