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

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imbalance_forge/errors.hpp"

namespace imbalance_forge::io {

namespace fs = std::filesystem;

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << text;
  if (!out) throw RuntimeError("write failed for " + path.string());
}

inline nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

/// Sidecar of a raw blob: "<blob>.json".
inline fs::path sidecar_path(const fs::path& blob) {
  return fs::path(blob.string() + ".json");
}

/// Writes values as little-endian float32 to `blob` and `header` to its
/// sidecar. header["dtype"] is forced to "f32le".
inline void write_f32le(const fs::path& blob, std::span<const double> values,
                        nlohmann::json header) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    if constexpr (std::endian::native == std::endian::big) {
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) |
             ((bits >> 8) & 0xff00u) | (bits >> 24);
    }
    std::memcpy(bytes.data() + 4 * i, &bits, 4);
  }
  header["dtype"] = "f32le";
  write_text(blob, std::string(bytes.begin(), bytes.end()));
  write_json(sidecar_path(blob), header);
}

struct F32Blob {
  nlohmann::json header;
  std::vector<double> values;
};

inline F32Blob read_f32le(const fs::path& blob) {
  F32Blob out;
  out.header = read_json(sidecar_path(blob));
  if (out.header.value("dtype", std::string()) != "f32le") {
    throw ValidationError(blob.string() + ": sidecar dtype must be f32le");
  }
  const std::string bytes = read_text(blob);
  if (bytes.size() % 4 != 0) {
    throw ValidationError(blob.string() + ": size is not a multiple of 4");
  }
  out.values.resize(bytes.size() / 4);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) {
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) |
             ((bits >> 8) & 0xff00u) | (bits >> 24);
    }
    out.values[i] = std::bit_cast<float>(bits);
  }
  return out;
}

}  // namespace imbalance_forge::io
