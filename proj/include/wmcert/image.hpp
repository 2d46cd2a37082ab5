/* Copyright 2026 The wmcert Authors. All Rights Reserved.

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

#ifndef WMCERT_IMAGE_HPP_
#define WMCERT_IMAGE_HPP_

#include <cstddef>
#include <span>
#include <vector>

#include "wmcert/error.hpp"

namespace wmcert {

/// Row-major grayscale image with values nominally in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), pixels(h * w, fill) {}

  std::size_t size() const noexcept { return pixels.size(); }
  double& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }

  bool operator==(const Image&) const = default;
};

/// Mean squared error between two images of equal shape.
inline double mse(const Image& a, const Image& b) {
  require(a.height == b.height && a.width == b.width, "image shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace wmcert

#endif  // WMCERT_IMAGE_HPP_
