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

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "imbalance_forge/errors.hpp"
#include "imbalance_forge/io.hpp"

namespace imbalance_forge {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// H x W map of class ids, row-major. kIgnoreLabel marks void pixels.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(h * w, fill) {}
  LabelMap(std::size_t h, std::size_t w, std::vector<std::uint8_t> values)
      : height(h), width(w), pixels(std::move(values)) {
    if (pixels.size() != h * w) {
      throw ValidationError("label map data does not match " +
                            std::to_string(h) + "x" + std::to_string(w));
    }
  }

  std::size_t size() const { return pixels.size(); }
  std::uint8_t& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const {
    return pixels[r * width + c];
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Binary 8-bit PGM (P5, maxval 255).
inline void write_pgm(const std::filesystem::path& path, const LabelMap& map) {
  std::string out = "P5\n" + std::to_string(map.width) + " " +
                    std::to_string(map.height) + "\n255\n";
  out.append(map.pixels.begin(), map.pixels.end());
  io::write_text(path, out);
}

inline LabelMap read_pgm(const std::filesystem::path& path) {
  const std::string bytes = io::read_text(path);
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> ValidationError {
    return ValidationError(path.string() + ": " + why);
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space();
    std::size_t start = pos, value = 0;
    while (pos < bytes.size() &&
           std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      ++pos;
    }
    if (pos == start) throw fail("malformed PGM header");
    return value;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw fail("not a binary PGM (P5)");
  }
  pos = 2;
  const std::size_t width = read_uint();
  const std::size_t height = read_uint();
  const std::size_t maxval = read_uint();
  if (maxval != 255) throw fail("PGM maxval must be 255");
  if (width == 0 || height == 0) throw fail("PGM has zero extent");
  // Exactly one whitespace byte separates the header from the raster.
  if (pos >= bytes.size() ||
      !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw fail("malformed PGM header");
  }
  ++pos;
  if (bytes.size() - pos != width * height) {
    throw fail("PGM raster size does not match header");
  }
  std::vector<std::uint8_t> pixels(bytes.begin() + static_cast<long>(pos),
                                   bytes.end());
  return LabelMap(height, width, std::move(pixels));
}

}  // namespace imbalance_forge
