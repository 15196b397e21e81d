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
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "imbalance_forge/errors.hpp"
#include "imbalance_forge/io.hpp"
#include "imbalance_forge/label_map.hpp"
#include "imbalance_forge/manifest.hpp"
#include "imbalance_forge/rng.hpp"
#include "imbalance_forge/tensor.hpp"

namespace imbalance_forge {

struct SynthClass {
  int id = 0;
  std::string name;
  ClassGroup group = ClassGroup::kMisc;
  double target_frequency = 1.0;
  std::vector<double> mean;
  double region_scale = 0.1;
};

struct SynthConfig {
  std::size_t num_images = 100;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t feature_dim = 3;
  double noise_sigma = 0.1;
  int background_class = 0;
  std::uint64_t seed = 0;
  std::vector<SynthClass> classes;

  void validate() const {
    if (num_images == 0 || height == 0 || width == 0 || feature_dim == 0) {
      throw ValidationError("synth sizes must be positive");
    }
    if (!(noise_sigma >= 0.0)) {
      throw ValidationError("synth noise_sigma must be >= 0");
    }
    if (classes.empty()) throw ValidationError("synth config has no classes");
    bool background_seen = false;
    for (std::size_t i = 0; i < classes.size(); ++i) {
      const auto& c = classes[i];
      if (c.id != static_cast<int>(i)) {
        throw ValidationError("synth class ids must be contiguous from 0");
      }
      if (c.mean.size() != feature_dim) {
        throw ValidationError("synth class " + c.name +
                              " mean has wrong length");
      }
      if (!(c.target_frequency > 0.0 && c.target_frequency <= 1.0)) {
        throw ValidationError("synth class " + c.name +
                              " frequency must lie in (0, 1]");
      }
      if (!(c.region_scale > 0.0 && c.region_scale <= 1.0)) {
        throw ValidationError("synth class " + c.name +
                              " region_scale must lie in (0, 1]");
      }
      if (c.id == background_class) {
        background_seen = true;
        if (c.target_frequency != 1.0) {
          throw ValidationError("background class frequency must be 1.0");
        }
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (classes[j].mean == c.mean) {
          throw ValidationError("synth class means must be distinct");
        }
      }
    }
    if (!background_seen) throw ValidationError("background class not listed");
  }

  TaskSpec task() const {
    TaskSpec t;
    t.task = TaskId::kCustom;
    for (const auto& c : classes) t.classes.push_back({c.id, c.name, c.group});
    return t;
  }

  static SynthConfig from_json(const nlohmann::json& j) {
    try {
      SynthConfig cfg;
      cfg.num_images = j.at("num_images").get<std::size_t>();
      cfg.height = j.at("height").get<std::size_t>();
      cfg.width = j.at("width").get<std::size_t>();
      cfg.feature_dim = j.at("feature_dim").get<std::size_t>();
      cfg.noise_sigma = j.at("noise_sigma").get<double>();
      cfg.background_class = j.value("background_class", 0);
      cfg.seed = j.value("seed", std::uint64_t{0});
      for (const auto& c : j.at("classes")) {
        SynthClass sc;
        sc.id = c.at("id").get<int>();
        sc.name = c.value("name", "class_" + std::to_string(sc.id));
        sc.group = parse_class_group(c.value("group", std::string("misc")));
        sc.target_frequency = c.at("frequency").get<double>();
        sc.mean = c.at("mean").get<std::vector<double>>();
        sc.region_scale = c.value("region_scale", 0.1);
        cfg.classes.push_back(std::move(sc));
      }
      cfg.validate();
      return cfg;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed synth config: ") + e.what());
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json cl = nlohmann::json::array();
    for (const auto& c : classes) {
      cl.push_back({{"id", c.id},
                    {"name", c.name},
                    {"group", to_string(c.group)},
                    {"frequency", c.target_frequency},
                    {"mean", c.mean},
                    {"region_scale", c.region_scale}});
    }
    return {{"num_images", num_images}, {"height", height},
            {"width", width},           {"feature_dim", feature_dim},
            {"noise_sigma", noise_sigma}, {"background_class", background_class},
            {"seed", seed},             {"classes", cl}};
  }
};

struct SynthRecord {
  Tensor features;  // [H, W, F]
  LabelMap labels;
  RecordStats stats;
};

struct SynthDataset {
  DatasetManifest manifest;
  std::vector<SynthRecord> records;  // parallel to manifest.records()
};

inline std::string synth_record_id(std::size_t index) {
  std::string digits = std::to_string(index);
  return "img_" + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') +
         digits;
}

namespace detail {

struct Rect {
  std::size_t x0, y0, w, h;
};

// Axis-aligned rectangle of roughly `scale` of the image area with aspect
// ratio log-uniform in [1/2, 2].
inline Rect draw_rect(Rng& rng, std::size_t height, std::size_t width,
                      double scale) {
  const double area = scale * static_cast<double>(height * width);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    const double area_jitter = area * rng.uniform(0.75, 1.25);
    auto w = static_cast<std::size_t>(std::lround(std::sqrt(area_jitter * aspect)));
    w = std::min(w, width);
    if (w == 0) continue;
    auto h = static_cast<std::size_t>(
        std::lround(area_jitter / static_cast<double>(w)));
    h = std::min(h, height);
    if (h == 0) continue;
    const auto x0 = static_cast<std::size_t>(rng.index(width - w + 1));
    const auto y0 = static_cast<std::size_t>(rng.index(height - h + 1));
    return {x0, y0, w, h};
  }
  throw RuntimeError("could not draw a non-degenerate rectangle in 100 attempts");
}

}  // namespace detail

/// Draws one image. Each non-background class is included with probability
/// equal to its target frequency and painted as a rectangle, later classes
/// overwriting earlier ones; features are the class mean plus Gaussian noise.
inline SynthRecord generate_record(const SynthConfig& cfg, std::size_t index) {
  Rng rng = Rng::stream(cfg.seed, "image", {index});
  const std::size_t h = cfg.height, w = cfg.width, f = cfg.feature_dim;
  LabelMap labels(h, w, static_cast<std::uint8_t>(cfg.background_class));
  for (const auto& c : cfg.classes) {
    if (c.id == cfg.background_class) continue;
    if (!rng.bernoulli(c.target_frequency)) continue;
    const auto r = detail::draw_rect(rng, h, w, c.region_scale);
    for (std::size_t y = r.y0; y < r.y0 + r.h; ++y) {
      for (std::size_t x = r.x0; x < r.x0 + r.w; ++x) {
        labels.at(y, x) = static_cast<std::uint8_t>(c.id);
      }
    }
  }
  Tensor features({h, w, f});
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto& mean = cfg.classes[labels.pixels[i]].mean;
    for (std::size_t k = 0; k < f; ++k) {
      features[i * f + k] = mean[k] + cfg.noise_sigma * rng.normal();
    }
  }
  RecordStats stats;
  stats.record_id = synth_record_id(index);
  stats.width = static_cast<std::int64_t>(w);
  stats.height = static_cast<std::int64_t>(h);
  stats.pixel_counts = count_labels(labels, cfg.classes.size());
  return {std::move(features), std::move(labels), std::move(stats)};
}

inline SynthDataset generate_dataset(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<SynthRecord> records;
  std::vector<RecordStats> stats;
  records.reserve(cfg.num_images);
  for (std::size_t i = 0; i < cfg.num_images; ++i) {
    records.push_back(generate_record(cfg, i));
    stats.push_back(records.back().stats);
  }
  return {DatasetManifest(cfg.task(), std::move(stats)), std::move(records)};
}

/// Writes labels/<id>.pgm, features/<id>.bin (+ .json sidecar) and
/// manifest.jsonl under `dir`.
inline void save_dataset(const std::filesystem::path& dir,
                         const SynthDataset& data) {
  std::vector<RecordStats> stats;
  for (const auto& rec : data.records) {
    RecordStats s = rec.stats;
    s.label_path = "labels/" + s.record_id + ".pgm";
    s.image_path = "features/" + s.record_id + ".bin";
    write_pgm(dir / *s.label_path, rec.labels);
    io::write_f32le(dir / *s.image_path, rec.features.data(),
                    {{"shape", rec.features.shape()}});
    stats.push_back(std::move(s));
  }
  write_manifest(dir / "manifest.jsonl",
                 DatasetManifest(data.manifest.task(), std::move(stats)));
}

/// Loads a dataset written by save_dataset. Label histograms must agree with
/// the manifest.
inline SynthDataset load_dataset(const std::filesystem::path& dir) {
  DatasetManifest manifest = load_manifest(dir / "manifest.jsonl");
  std::vector<SynthRecord> records;
  for (const auto& s : manifest.records()) {
    if (!s.image_path || !s.label_path) {
      throw ValidationError("record '" + s.record_id +
                            "' lacks image_path or label_path");
    }
    LabelMap labels = read_pgm(dir / *s.label_path);
    if (static_cast<std::int64_t>(labels.width) != s.width ||
        static_cast<std::int64_t>(labels.height) != s.height ||
        count_labels(labels, manifest.num_classes()) != s.pixel_counts) {
      throw ValidationError("record '" + s.record_id +
                            "' labels disagree with the manifest");
    }
    auto blob = io::read_f32le(dir / *s.image_path);
    Tensor features(blob.header.at("shape").get<Shape>(), std::move(blob.values));
    if (features.rank() != 3 || features.dim(0) != labels.height ||
        features.dim(1) != labels.width) {
      throw ValidationError("record '" + s.record_id +
                            "' features do not match its label map");
    }
    records.push_back({std::move(features), std::move(labels), s});
  }
  return {std::move(manifest), std::move(records)};
}

// ---------------------------------------------------------------------------
// Augmentations. Images are [H, W, C] tensors.
// ---------------------------------------------------------------------------

inline std::pair<Tensor, LabelMap> hflip(const Tensor& image,
                                         const LabelMap& labels) {
  if (image.rank() != 3 || image.dim(0) != labels.height ||
      image.dim(1) != labels.width) {
    throw ValidationError("hflip: image and labels disagree in shape");
  }
  const std::size_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  Tensor out = Tensor::zeros_like(image);
  LabelMap lab(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t src = y * w + (w - 1 - x), dst = y * w + x;
      lab.pixels[dst] = labels.pixels[src];
      for (std::size_t k = 0; k < ch; ++k) out[dst * ch + k] = image[src * ch + k];
    }
  }
  return {std::move(out), std::move(lab)};
}

inline double blur_sigma(int kernel_size) {
  return 0.3 * ((kernel_size - 1) / 2.0 - 1.0) + 0.8;
}

/// Normalised 1-D Gaussian taps for an odd kernel size.
inline std::vector<double> gaussian_kernel(int kernel_size) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ValidationError("blur kernel size must be odd, got " +
                          std::to_string(kernel_size));
  }
  const double sigma = blur_sigma(kernel_size);
  const int r = kernel_size / 2;
  std::vector<double> k(static_cast<std::size_t>(kernel_size));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    const double v = std::exp(-(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + r)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

// Reflection without edge repeat: dcb|abcd|cba.
inline std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n - 1);
  long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

/// Separable Gaussian blur with reflect padding.
inline Tensor gaussian_blur(const Tensor& image, int kernel_size) {
  if (image.rank() != 3) throw ValidationError("blur expects an [H,W,C] image");
  const auto k = gaussian_kernel(kernel_size);
  const long r = kernel_size / 2;
  const std::size_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  Tensor tmp = Tensor::zeros_like(image);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (long t = -r; t <= r; ++t) {
        const std::size_t xs = reflect_index(static_cast<long>(x) + t, w);
        const double wt = k[static_cast<std::size_t>(t + r)];
        for (std::size_t c = 0; c < ch; ++c) {
          tmp[(y * w + x) * ch + c] += wt * image[(y * w + xs) * ch + c];
        }
      }
    }
  }
  Tensor out = Tensor::zeros_like(image);
  for (std::size_t y = 0; y < h; ++y) {
    for (long t = -r; t <= r; ++t) {
      const std::size_t ys = reflect_index(static_cast<long>(y) + t, h);
      const double wt = k[static_cast<std::size_t>(t + r)];
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t c = 0; c < ch; ++c) {
          out[(y * w + x) * ch + c] += wt * tmp[(ys * w + x) * ch + c];
        }
      }
    }
  }
  return out;
}

struct ColorJitterRanges {
  std::array<double, 2> brightness{2.0 / 3.0, 1.5};
  std::array<double, 2> contrast{2.0 / 3.0, 1.5};
  std::array<double, 2> saturation{2.0 / 3.0, 1.5};
  std::array<double, 2> hue{-0.05, 0.05};
};

struct ColorJitterFactors {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;
};

inline ColorJitterFactors draw_color_jitter(Rng& rng,
                                            const ColorJitterRanges& r = {}) {
  ColorJitterFactors f;
  f.brightness = rng.uniform(r.brightness[0], r.brightness[1]);
  f.contrast = rng.uniform(r.contrast[0], r.contrast[1]);
  f.saturation = rng.uniform(r.saturation[0], r.saturation[1]);
  f.hue = rng.uniform(r.hue[0], r.hue[1]);
  return f;
}

inline double luma(double r, double g, double b) {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

namespace detail {

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double delta = mx - mn;
  double h = 0.0;
  if (delta > 0.0) {
    if (mx == r) {
      h = std::fmod((g - b) / delta, 6.0);
    } else if (mx == g) {
      h = (b - r) / delta + 2.0;
    } else {
      h = (r - g) / delta + 4.0;
    }
    h /= 6.0;
    if (h < 0.0) h += 1.0;
  }
  const double s = mx > 0.0 ? delta / mx : 0.0;
  return {h, s, mx};
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = h * 6.0;
  const int sector = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f),
               t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0:
      return {v, t, p};
    case 1:
      return {q, v, p};
    case 2:
      return {p, v, t};
    case 3:
      return {p, q, v};
    case 4:
      return {t, p, v};
    default:
      return {v, p, q};
  }
}

}  // namespace detail

/// Brightness, contrast, saturation, then hue; each step clamps to [0, 1].
/// Contrast blends toward the image's mean luma, saturation toward each
/// pixel's luma, and hue rotates in HSV by `hue` turns.
inline Tensor color_jitter(const Tensor& image, const ColorJitterFactors& f) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ValidationError("color jitter expects an [H,W,3] image");
  }
  Tensor out = image;
  const std::size_t pixels = image.dim(0) * image.dim(1);
  auto px = [&](std::size_t i) { return out.data().subspan(i * 3, 3); };

  for (double& v : out.data()) v = detail::clamp01(v * f.brightness);

  double mean_gray = 0.0;
  for (std::size_t i = 0; i < pixels; ++i) {
    auto p = px(i);
    mean_gray += luma(p[0], p[1], p[2]);
  }
  mean_gray /= static_cast<double>(pixels);
  for (double& v : out.data()) {
    v = detail::clamp01(mean_gray + (v - mean_gray) * f.contrast);
  }

  for (std::size_t i = 0; i < pixels; ++i) {
    auto p = px(i);
    const double gray = luma(p[0], p[1], p[2]);
    for (double& v : p) v = detail::clamp01(gray + (v - gray) * f.saturation);
  }

  if (f.hue != 0.0) {
    for (std::size_t i = 0; i < pixels; ++i) {
      auto p = px(i);
      auto [h, s, v] = detail::rgb_to_hsv(p[0], p[1], p[2]);
      h = std::fmod(h + f.hue, 1.0);
      if (h < 0.0) h += 1.0;
      const auto rgb = detail::hsv_to_rgb(h, s, v);
      for (int c = 0; c < 3; ++c) p[c] = detail::clamp01(rgb[c]);
    }
  }
  return out;
}

inline Tensor color_jitter(const Tensor& image, const ColorJitterRanges& ranges,
                           Rng& rng) {
  return color_jitter(image, draw_color_jitter(rng, ranges));
}

struct AugmentConfig {
  bool hflip = false;
  bool blur = false;
  bool color_jitter = false;
  double hflip_prob = 0.5;
  double blur_prob = 0.05;
  ColorJitterRanges jitter;

  static AugmentConfig from_json(const nlohmann::json& j) {
    AugmentConfig a;
    a.hflip = j.value("hflip", false);
    a.blur = j.value("blur", false);
    a.color_jitter = j.value("color_jitter", false);
    return a;
  }
  nlohmann::json to_json() const {
    return {{"hflip", hflip}, {"blur", blur}, {"color_jitter", color_jitter}};
  }
};

/// Training-time pipeline: flip with probability 0.5, blur with probability
/// 0.05 using a kernel drawn from {3, 5, 7}, then color jitter. Jitter needs
/// three channels; inputs are clamped to [0, 1] before jittering.
inline std::pair<Tensor, LabelMap> augment(Tensor image, LabelMap labels,
                                           const AugmentConfig& cfg, Rng& rng) {
  if (cfg.hflip && rng.bernoulli(cfg.hflip_prob)) {
    std::tie(image, labels) = hflip(image, labels);
  }
  if (cfg.blur && rng.bernoulli(cfg.blur_prob)) {
    const int k = 3 + 2 * static_cast<int>(rng.index(3));
    image = gaussian_blur(image, k);
  }
  if (cfg.color_jitter) {
    for (double& v : image.data()) v = detail::clamp01(v);
    image = color_jitter(image, cfg.jitter, rng);
  }
  return {std::move(image), std::move(labels)};
}

}  // namespace imbalance_forge
