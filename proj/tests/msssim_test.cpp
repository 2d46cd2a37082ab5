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

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "wmcert/msssim.hpp"

namespace wmcert {
namespace {

Image RandomImage(std::mt19937_64& rng, std::size_t h = 16, std::size_t w = 16) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image x(h, w);
  for (double& v : x.pixels) v = u(rng);
  return x;
}

// Straightforward reference: per-window statistics with explicit loops,
// 2x2 averaging between scales, relu on each term.
struct RefTerms {
  double ssim, cs;
};

RefTerms RefScale(const Image& x, const Image& y) {
  const int k = 7;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  double w[7][7], tot = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      w[i][j] = std::exp(-((i - 3.0) * (i - 3.0) + (j - 3.0) * (j - 3.0)) / (2 * sigma * sigma));
      tot += w[i][j];
    }
  double ss = 0, cs = 0;
  int n = 0;
  for (std::size_t r = 0; r + k <= x.height; ++r)
    for (std::size_t c = 0; c + k <= x.width; ++c) {
      double mx = 0, my = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          mx += w[i][j] / tot * x.at(r + i, c + j);
          my += w[i][j] / tot * y.at(r + i, c + j);
        }
      double vx = 0, vy = 0, cov = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const double a = x.at(r + i, c + j) - mx, b = y.at(r + i, c + j) - my;
          vx += w[i][j] / tot * a * a;
          vy += w[i][j] / tot * b * b;
          cov += w[i][j] / tot * a * b;
        }
      const double l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
      const double s = (2 * cov + c2) / (vx + vy + c2);
      ss += l * s;
      cs += s;
      ++n;
    }
  return {ss / n, cs / n};
}

Image RefDown(const Image& x) {
  Image o(x.height / 2, x.width / 2);
  for (std::size_t r = 0; r < o.height; ++r)
    for (std::size_t c = 0; c < o.width; ++c)
      o.at(r, c) = (x.at(2 * r, 2 * c) + x.at(2 * r + 1, 2 * c) + x.at(2 * r, 2 * c + 1) +
                    x.at(2 * r + 1, 2 * c + 1)) / 4;
  return o;
}

double RefMsSsim(Image x, Image y, int scales) {
  const double base[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  double wsum = 0;
  for (int s = 0; s < scales; ++s) wsum += base[s];
  double v = 1.0;
  for (int s = 0; s < scales; ++s) {
    const RefTerms t = RefScale(x, y);
    const double term = (s + 1 == scales) ? t.ssim : t.cs;
    v *= std::pow(std::max(term, 0.0), base[s] / wsum);
    x = RefDown(x);
    y = RefDown(y);
  }
  return v;
}

TEST(MsSsimTest, ScaleCount) {
  EXPECT_EQ(msssim_scale_count(16, 16), 2u);
  EXPECT_EQ(msssim_scale_count(8, 8), 1u);
  EXPECT_EQ(msssim_scale_count(64, 32), 3u);
  EXPECT_EQ(msssim_scale_count(7, 30), 0u);
}

TEST(MsSsimTest, IdenticalImagesScoreOne) {
  std::mt19937_64 rng(1);
  const Image x = RandomImage(rng);
  EXPECT_NEAR(ms_ssim(x, x), 1.0, 1e-12);
}

TEST(MsSsimTest, ConstantVersusInverted) {
  const Image zero(16, 16, 0.0), one(16, 16, 1.0);
  const double v = ms_ssim(zero, one);
  EXPECT_NEAR(v, RefMsSsim(zero, one, 2), 1e-15);
  // Closed form: cs = 1 at both scales, l = C1 / (1 + C1).
  const double w1 = 0.2856 / (0.0448 + 0.2856);
  EXPECT_NEAR(v, std::pow(1e-4 / (1 + 1e-4), w1), 1e-15);
  EXPECT_GT(1.0 - v, 0.999);
}

TEST(MsSsimTest, MatchesReferenceAndIsSymmetric) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    const Image x = RandomImage(rng, 16 + 8 * (rep % 3), 16 + 16 * (rep % 2));
    Image y = x;
    std::normal_distribution<double> n(0.0, 0.1 + 0.05 * rep);
    for (double& v : y.pixels) v = std::clamp(v + n(rng), 0.0, 1.0);
    const int s = static_cast<int>(msssim_scale_count(x.height, x.width));
    EXPECT_NEAR(ms_ssim(x, y), RefMsSsim(x, y, s), 1e-12);
    EXPECT_NEAR(ms_ssim(x, y), ms_ssim(y, x), 1e-13);
  }
}

TEST(MsSsimTest, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(3);
  Image x = RandomImage(rng);
  Image y = x;
  std::normal_distribution<double> n(0.0, 0.1);
  for (double& v : y.pixels) v = std::clamp(v + n(rng), 0.0, 1.0);
  Image g;
  ms_ssim(x, y, {}, &g);
  for (std::size_t i = 0; i < x.size(); i += 7) {
    const double orig = x.pixels[i];
    x.pixels[i] = orig + 1e-6;
    const double p = ms_ssim(x, y);
    x.pixels[i] = orig - 1e-6;
    const double m = ms_ssim(x, y);
    x.pixels[i] = orig;
    const double fd = (p - m) / 2e-6;
    EXPECT_NEAR(g.pixels[i], fd, 1e-6 + 1e-5 * std::abs(fd)) << i;
  }
}

TEST(MsSsimTest, WeightsRenormalised) {
  auto w = msssim_weights(2);
  EXPECT_NEAR(w[0] + w[1], 1.0, 1e-15);
  EXPECT_NEAR(w[0] / w[1], 0.0448 / 0.2856, 1e-15);
  EXPECT_EQ(msssim_weights(5)[4], 0.1333 / (0.0448 + 0.2856 + 0.3001 + 0.2363 + 0.1333));
}

TEST(MsSsimTest, TooSmallIsConfigurationError) {
  const Image a(6, 6, 0.5);
  try {
    ms_ssim(a, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidConfiguration);
  }
}

}  // namespace
}  // namespace wmcert
