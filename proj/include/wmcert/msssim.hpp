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

// Multi-scale structural similarity with an analytic gradient with respect to
// the first image.

#ifndef WMCERT_MSSSIM_HPP_
#define WMCERT_MSSSIM_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "wmcert/error.hpp"
#include "wmcert/image.hpp"

namespace wmcert {

struct SsimOptions {
  std::size_t window = 7;
  double window_sigma = 1.5;
  double c1 = 0.01 * 0.01;  // (K1 * L)^2 on unit dynamic range
  double c2 = 0.03 * 0.03;
  std::size_t scales = 0;  // 0 = derived from image size
};

/// Scale count floor(log2(min(H, W) / 8)) + 1; zero means too small.
inline std::size_t msssim_scale_count(std::size_t height, std::size_t width) {
  const double m = static_cast<double>(std::min(height, width));
  if (m < 8.0) return 0;
  return static_cast<std::size_t>(std::floor(std::log2(m / 8.0))) + 1;
}

namespace detail {

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w(size * size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t q = 0; q < size; ++q) {
      const double dr = static_cast<double>(r) - c, dq = static_cast<double>(q) - c;
      w[r * size + q] = std::exp(-(dr * dr + dq * dq) / (2.0 * sigma * sigma));
      total += w[r * size + q];
    }
  for (double& v : w) v /= total;
  return w;
}

inline Image downsample2(const Image& x) {
  Image out(x.height / 2, x.width / 2);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c)
      out.at(r, c) = 0.25 * (x.at(2 * r, 2 * c) + x.at(2 * r + 1, 2 * c) +
                             x.at(2 * r, 2 * c + 1) + x.at(2 * r + 1, 2 * c + 1));
  return out;
}

inline void upsample2_grad(const Image& g_small, Image& g_big) {
  for (std::size_t r = 0; r < g_small.height; ++r)
    for (std::size_t c = 0; c < g_small.width; ++c) {
      const double v = 0.25 * g_small.at(r, c);
      g_big.at(2 * r, 2 * c) += v;
      g_big.at(2 * r + 1, 2 * c) += v;
      g_big.at(2 * r, 2 * c + 1) += v;
      g_big.at(2 * r + 1, 2 * c + 1) += v;
    }
}

// Window-averaged SSIM terms at one scale. If grad_full / grad_cs are given
// they receive d(mean ssim)/dx and d(mean cs)/dx.
struct ScaleTerms {
  double ssim = 0.0;  // mean of l * cs
  double cs = 0.0;    // mean of cs
};

inline ScaleTerms scale_terms(const Image& x, const Image& y, const SsimOptions& opt,
                              const std::vector<double>& win, Image* grad_full,
                              Image* grad_cs) {
  const std::size_t k = opt.window;
  const std::size_t nr = x.height - k + 1, nc = x.width - k + 1;
  const double inv_n = 1.0 / static_cast<double>(nr * nc);
  ScaleTerms out;
  for (std::size_t r = 0; r < nr; ++r) {
    for (std::size_t c = 0; c < nc; ++c) {
      double mx = 0, my = 0, exx = 0, eyy = 0, exy = 0;
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          const double w = win[i * k + j];
          const double a = x.at(r + i, c + j), b = y.at(r + i, c + j);
          mx += w * a;
          my += w * b;
          exx += w * a * a;
          eyy += w * b * b;
          exy += w * a * b;
        }
      const double vx = exx - mx * mx, vy = eyy - my * my, cxy = exy - mx * my;
      const double la = 2.0 * mx * my + opt.c1, lb = mx * mx + my * my + opt.c1;
      const double ca = 2.0 * cxy + opt.c2, cb = vx + vy + opt.c2;
      const double l = la / lb, cs = ca / cb;
      out.ssim += l * cs * inv_n;
      out.cs += cs * inv_n;
      if (grad_full == nullptr && grad_cs == nullptr) continue;

      const double dl_dmx = (2.0 * my * lb - la * 2.0 * mx) / (lb * lb);
      const double dcs_dvx = -ca / (cb * cb);
      const double dcs_dcxy = 2.0 / cb;
      // d/dx_i = w_i [F_mu + 2 F_var (x_i - mx) + F_cov (y_i - my)]
      auto scatter = [&](Image& g, double f_mu, double f_var, double f_cov) {
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const double w = win[i * k + j] * inv_n;
            const double a = x.at(r + i, c + j), b = y.at(r + i, c + j);
            g.at(r + i, c + j) +=
                w * (f_mu + 2.0 * f_var * (a - mx) + f_cov * (b - my));
          }
      };
      if (grad_full) scatter(*grad_full, cs * dl_dmx, l * dcs_dvx, l * dcs_dcxy);
      if (grad_cs) scatter(*grad_cs, 0.0, dcs_dvx, dcs_dcxy);
    }
  }
  return out;
}

}  // namespace detail

/// Exponents of the standard five-scale MS-SSIM, truncated to the first
/// `scales` entries and renormalized to sum to one.
inline std::vector<double> msssim_weights(std::size_t scales) {
  static constexpr std::array<double, 5> kW = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  require(scales >= 1 && scales <= kW.size(), "MS-SSIM supports 1 to 5 scales",
          ErrorKind::kInvalidConfiguration);
  std::vector<double> w(kW.begin(), kW.begin() + static_cast<std::ptrdiff_t>(scales));
  double s = 0.0;
  for (double v : w) s += v;
  for (double& v : w) v /= s;
  return w;
}

/// Single-scale SSIM (mean over valid windows).
inline double ssim(const Image& x, const Image& y, const SsimOptions& opt = {}) {
  require(x.height == y.height && x.width == y.width, "image shapes differ");
  require(x.height >= opt.window && x.width >= opt.window,
          "image smaller than the SSIM window", ErrorKind::kInvalidConfiguration);
  const auto win = detail::gaussian_window(opt.window, opt.window_sigma);
  return detail::scale_terms(x, y, opt, win, nullptr, nullptr).ssim;
}

/// MS-SSIM(x, y) = prod_{j<S-1} relu(cs_j)^{w_j} * relu(ssim_{S-1})^{w_{S-1}}.
/// If grad is non-null it receives d MS-SSIM / d x.
inline double ms_ssim(const Image& x, const Image& y, const SsimOptions& opt = {},
                      Image* grad = nullptr) {
  require(x.height == y.height && x.width == y.width, "image shapes differ");
  std::size_t scales = opt.scales ? opt.scales : msssim_scale_count(x.height, x.width);
  if (scales == 0)
    fail(ErrorKind::kInvalidConfiguration,
         "image too small for one MS-SSIM scale (need min side >= 8)");
  if ((std::min(x.height, x.width) >> (scales - 1)) < opt.window)
    fail(ErrorKind::kInvalidConfiguration, "image too small for requested MS-SSIM scales");
  const auto weights = msssim_weights(scales);
  const auto win = detail::gaussian_window(opt.window, opt.window_sigma);

  std::vector<Image> xs{x}, ys{y};
  for (std::size_t s = 1; s < scales; ++s) {
    xs.push_back(detail::downsample2(xs.back()));
    ys.push_back(detail::downsample2(ys.back()));
  }
  std::vector<double> vals(scales);
  std::vector<Image> grads;
  for (std::size_t s = 0; s < scales; ++s) {
    const bool last = s + 1 == scales;
    Image g;
    if (grad) g = Image(xs[s].height, xs[s].width);
    const auto t = detail::scale_terms(xs[s], ys[s], opt, win,
                                       (grad && last) ? &g : nullptr,
                                       (grad && !last) ? &g : nullptr);
    vals[s] = last ? t.ssim : t.cs;
    if (grad) grads.push_back(std::move(g));
  }
  double value = 1.0;
  for (std::size_t s = 0; s < scales; ++s)
    value *= std::pow(std::max(vals[s], 0.0), weights[s]);

  if (grad) {
    *grad = Image(x.height, x.width);
    // Pull each scale's gradient back to full resolution, coarsest first.
    Image acc(xs.back().height, xs.back().width);
    for (std::size_t s = scales; s-- > 0;) {
      if (s + 1 < scales) {
        Image up(xs[s].height, xs[s].width);
        detail::upsample2_grad(acc, up);
        acc = std::move(up);
      }
      if (vals[s] > 0.0 && value > 0.0) {
        const double coef = value * weights[s] / vals[s];
        for (std::size_t i = 0; i < acc.size(); ++i) acc.pixels[i] += coef * grads[s].pixels[i];
      }
    }
    *grad = std::move(acc);
  }
  return value;
}

}  // namespace wmcert

#endif  // WMCERT_MSSSIM_HPP_
