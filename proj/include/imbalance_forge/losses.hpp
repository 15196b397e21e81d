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
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "imbalance_forge/diffmath.hpp"
#include "imbalance_forge/errors.hpp"
#include "imbalance_forge/label_map.hpp"
#include "imbalance_forge/tensor.hpp"

namespace imbalance_forge {

struct LossOutput {
  double value = 0.0;
  Tensor grad_logits;
};

namespace detail {

inline void check_loss_inputs(const Tensor& logits,
                              std::span<const std::uint8_t> labels) {
  require_rank2(logits, "logits");
  if (labels.size() != logits.dim(0)) {
    throw ValidationError("labels (" + std::to_string(labels.size()) +
                          ") and logits rows (" + std::to_string(logits.dim(0)) +
                          ") differ");
  }
  for (std::uint8_t v : labels) {
    if (v != kIgnoreLabel && v >= logits.dim(1)) {
      throw ValidationError("label " + std::to_string(v) + " outside " +
                            std::to_string(logits.dim(1)) + " classes");
    }
  }
}

// Cross-entropy over pixels whose correct-class probability is <= threshold.
// threshold >= 1 keeps every non-ignored pixel.
inline LossOutput thresholded_cross_entropy(const Tensor& logits,
                                            std::span<const std::uint8_t> labels,
                                            double threshold) {
  check_loss_inputs(logits, labels);
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  const Tensor p = softmax_rows(logits);
  std::vector<std::size_t> kept;
  double total = 0.0;
  for (std::size_t n = 0; n < rows; ++n) {
    const std::uint8_t y = labels[n];
    if (y == kIgnoreLabel) continue;
    if (p(n, y) > threshold) continue;
    const auto row = logits.row(n);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    total += m + std::log(z) - row[y];
    kept.push_back(n);
  }
  LossOutput out{0.0, Tensor::zeros_like(logits)};
  if (kept.empty()) return out;
  const double scale = 1.0 / static_cast<double>(kept.size());
  out.value = total * scale;
  for (std::size_t n : kept) {
    auto g = out.grad_logits.row(n);
    const auto pr = p.row(n);
    for (std::size_t c = 0; c < classes; ++c) g[c] = pr[c] * scale;
    g[labels[n]] -= scale;
  }
  return out;
}

}  // namespace detail

/// Mean over non-ignored pixels of -log softmax(logits)[label].
/// All pixels ignored gives value 0 and a zero gradient.
inline LossOutput cross_entropy(const Tensor& logits,
                                std::span<const std::uint8_t> labels) {
  return detail::thresholded_cross_entropy(
      logits, labels, std::numeric_limits<double>::infinity());
}

/// Cross-entropy restricted to hard pixels: those whose correct-class
/// probability exceeds `threshold` are dropped from value and gradient.
inline LossOutput ohem_cross_entropy(const Tensor& logits,
                                     std::span<const std::uint8_t> labels,
                                     double threshold = 0.7) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw ValidationError("OHEM threshold must lie in (0, 1]");
  }
  return detail::thresholded_cross_entropy(logits, labels, threshold);
}

/// Gradient of the Lovasz extension of the Jaccard loss with respect to
/// errors sorted in decreasing order. Returns nullopt when the class is
/// absent (no positives), which callers treat as "skip this class".
inline std::optional<std::vector<double>> lovasz_grad(
    std::span<const std::uint8_t> gt_sorted) {
  if (gt_sorted.empty()) throw ValidationError("lovasz_grad needs input");
  double positives = 0.0;
  for (auto v : gt_sorted) {
    if (v > 1) throw ValidationError("lovasz_grad expects binary labels");
    positives += v;
  }
  if (positives == 0.0) return std::nullopt;
  std::vector<double> g(gt_sorted.size());
  double cum_fg = 0.0, cum_bg = 0.0, prev = 0.0;
  for (std::size_t j = 0; j < gt_sorted.size(); ++j) {
    cum_fg += gt_sorted[j];
    cum_bg += 1.0 - gt_sorted[j];
    const double intersection = positives - cum_fg;
    const double uni = positives + cum_bg;
    const double jacc = 1.0 - intersection / uni;
    g[j] = jacc - prev;
    prev = jacc;
  }
  return g;
}

struct LovaszProbOutput {
  double value = 0.0;
  Tensor grad_probs;
  std::size_t classes_present = 0;
};

/// Lovasz-Softmax on probabilities for one image: mean over classes present
/// in the labels of the Lovasz hinge on per-pixel errors. Ignored pixels
/// contribute nothing. The sort is stable on pixel index so the chosen
/// permutation, and with it the subgradient at ties, is reproducible.
inline LovaszProbOutput lovasz_softmax_probs(const Tensor& probs,
                                             std::span<const std::uint8_t> labels) {
  detail::check_loss_inputs(probs, labels);
  const std::size_t classes = probs.dim(1);
  LovaszProbOutput out{0.0, Tensor::zeros_like(probs), 0};

  std::vector<std::size_t> valid;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] != kIgnoreLabel) valid.push_back(n);
  }
  if (valid.empty()) return out;

  std::vector<double> errors(valid.size());
  std::vector<std::size_t> perm(valid.size());
  std::vector<std::uint8_t> fg_sorted(valid.size());
  std::vector<std::uint8_t> present(classes, 0);
  for (std::size_t n : valid) present[labels[n]] = 1;

  std::vector<std::vector<double>> class_grads;
  for (std::size_t c = 0; c < classes; ++c) {
    if (!present[c]) continue;
    for (std::size_t k = 0; k < valid.size(); ++k) {
      const std::size_t n = valid[k];
      const double pc = probs(n, c);
      errors[k] = labels[n] == c ? 1.0 - pc : pc;
    }
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
      return errors[a] > errors[b];
    });
    for (std::size_t j = 0; j < perm.size(); ++j) {
      fg_sorted[j] = labels[valid[perm[j]]] == c ? 1 : 0;
    }
    const auto g = lovasz_grad(fg_sorted);
    double loss_c = 0.0;
    for (std::size_t j = 0; j < perm.size(); ++j) {
      loss_c += errors[perm[j]] * (*g)[j];
    }
    out.value += loss_c;
    ++out.classes_present;
    // d error / d p_c is -1 on foreground pixels and +1 elsewhere.
    for (std::size_t j = 0; j < perm.size(); ++j) {
      const std::size_t n = valid[perm[j]];
      out.grad_probs(n, c) += labels[n] == c ? -(*g)[j] : (*g)[j];
    }
  }
  const double scale = 1.0 / static_cast<double>(out.classes_present);
  out.value *= scale;
  for (double& v : out.grad_probs.data()) v *= scale;
  return out;
}

/// Lovasz-Softmax on logits for one image.
inline LossOutput lovasz_softmax(const Tensor& logits,
                                 std::span<const std::uint8_t> labels) {
  detail::check_loss_inputs(logits, labels);
  const Tensor p = softmax_rows(logits);
  auto lp = lovasz_softmax_probs(p, labels);
  if (lp.classes_present == 0) return {0.0, Tensor::zeros_like(logits)};
  return {lp.value, softmax_backward_rows(p, lp.grad_probs)};
}

/// Lovasz-Softmax over a batch whose rows are the concatenated pixels of
/// several images: computed per image, then averaged over images that have at
/// least one labelled pixel.
inline LossOutput lovasz_softmax_per_image(
    const Tensor& logits, std::span<const std::uint8_t> labels,
    std::span<const std::size_t> image_pixels) {
  detail::check_loss_inputs(logits, labels);
  const std::size_t classes = logits.dim(1);
  if (std::accumulate(image_pixels.begin(), image_pixels.end(), std::size_t{0}) !=
      logits.dim(0)) {
    throw ValidationError("image pixel counts do not sum to the batch rows");
  }
  LossOutput out{0.0, Tensor::zeros_like(logits)};
  std::size_t offset = 0, contributing = 0;
  std::vector<std::pair<std::size_t, Tensor>> grads;
  for (std::size_t n_pix : image_pixels) {
    std::vector<double> slice(logits.data().begin() +
                                  static_cast<long>(offset * classes),
                              logits.data().begin() +
                                  static_cast<long>((offset + n_pix) * classes));
    Tensor img({n_pix, classes}, std::move(slice));
    const Tensor p = softmax_rows(img);
    auto lp = lovasz_softmax_probs(p, labels.subspan(offset, n_pix));
    if (lp.classes_present > 0) {
      ++contributing;
      out.value += lp.value;
      grads.emplace_back(offset, softmax_backward_rows(p, lp.grad_probs));
    }
    offset += n_pix;
  }
  if (contributing == 0) return out;
  const double scale = 1.0 / static_cast<double>(contributing);
  out.value *= scale;
  for (const auto& [start, g] : grads) {
    for (std::size_t k = 0; k < g.size(); ++k) {
      out.grad_logits[start * classes + k] = g[k] * scale;
    }
  }
  return out;
}

}  // namespace imbalance_forge
