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

// Synthetic image families and the regression trainer used to pretrain the
// toy generator and to fine-tune it on surrogate downstream tasks.

#ifndef WMCERT_SYNTHETIC_HPP_
#define WMCERT_SYNTHETIC_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wmcert/error.hpp"
#include "wmcert/image.hpp"
#include "wmcert/params.hpp"
#include "wmcert/rng.hpp"
#include "wmcert/toymodel.hpp"

namespace wmcert {

enum class ImageFamily {
  kBars,       // prompt-dependent oriented bars: the base generation task
  kEllipses,
  kGradients,
  kCheckers,
  kRings,
};

inline std::string family_name(ImageFamily f) {
  switch (f) {
    case ImageFamily::kBars: return "bars";
    case ImageFamily::kEllipses: return "ellipses";
    case ImageFamily::kGradients: return "gradients";
    case ImageFamily::kCheckers: return "checkers";
    case ImageFamily::kRings: return "rings";
  }
  return "unknown";
}

inline ImageFamily parse_family(const std::string& s) {
  for (auto f : {ImageFamily::kBars, ImageFamily::kEllipses, ImageFamily::kGradients,
                 ImageFamily::kCheckers, ImageFamily::kRings})
    if (family_name(f) == s) return f;
  fail(ErrorKind::kInvalidArgument, "unknown image family '" + s + "'");
}

/// Deterministic target image for latent z and prompt. Uses z[0..4].
inline Image target_image(ImageFamily family, std::span<const double> z, Label prompt,
                          std::size_t num_labels, std::size_t height, std::size_t width) {
  auto zt = [&](std::size_t i) { return i < z.size() ? std::tanh(z[i]) : 0.0; };
  Image img(height, width);
  const double cr = (static_cast<double>(height) - 1.0) / 2.0;
  const double cc = (static_cast<double>(width) - 1.0) / 2.0;
  const double scale = static_cast<double>(std::min(height, width)) / 16.0;
  const double angle = std::numbers::pi * static_cast<double>(prompt) /
                       static_cast<double>(num_labels);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double dr = static_cast<double>(r) - cr, dc = static_cast<double>(c) - cc;
      double v = 0.0;
      switch (family) {
        case ImageFamily::kBars: {
          // Orientation jitter lets a minority of samples resemble the next label.
          const double th = angle + 0.55 * std::numbers::pi / static_cast<double>(num_labels) * zt(4);
          const double d = dr * std::cos(th) + dc * std::sin(th) - 2.5 * scale * zt(0);
          const double w = (1.5 + 0.5 * zt(1)) * scale;
          v = 0.15 + 0.05 * zt(3) + (0.6 + 0.2 * zt(2)) * std::exp(-d * d / (2.0 * w * w));
          break;
        }
        case ImageFamily::kEllipses: {
          const double er = dr - 2.0 * scale * zt(0), ec = dc - 2.0 * scale * zt(1);
          const double ar = (3.5 + 1.5 * zt(2)) * scale, ac = (3.5 - 1.5 * zt(2)) * scale;
          const double q = (er * er) / (ar * ar) + (ec * ec) / (ac * ac);
          v = 0.2 + (0.55 + 0.15 * zt(3)) / (1.0 + std::exp(6.0 * (q - 1.0)));
          break;
        }
        case ImageFamily::kGradients: {
          const double phi = std::numbers::pi * zt(0) + angle;
          const double proj = (dr * std::cos(phi) + dc * std::sin(phi)) / (8.0 * scale);
          v = 0.5 + (0.3 + 0.1 * zt(1)) * proj + 0.05 * zt(2);
          break;
        }
        case ImageFamily::kCheckers: {
          const double f = (0.6 + 0.2 * zt(0)) / scale;
          v = 0.5 + (0.3 + 0.05 * zt(3)) * std::sin(f * dr + 3.0 * zt(1)) *
                        std::sin(f * dc + 3.0 * zt(2));
          break;
        }
        case ImageFamily::kRings: {
          const double rad = std::sqrt(dr * dr + dc * dc) / scale;
          v = 0.5 + 0.3 * std::cos((1.0 + 0.3 * zt(0)) * rad + 3.0 * zt(1)) *
                        std::exp(-rad / (8.0 + 3.0 * zt(2)));
          break;
        }
      }
      img.at(r, c) = std::clamp(v, 0.02, 0.98);
    }
  }
  return img;
}

/// Adam update state for a LayeredParams vector.
class Adam {
 public:
  Adam(const Layout& layout, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : m_(layout), v_(layout), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(LayeredParams& p, const LayeredParams& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    auto pf = p.flat();
    const auto gf = g.flat();
    auto mf = m_.flat();
    auto vf = v_.flat();
    for (std::size_t i = 0; i < pf.size(); ++i) {
      mf[i] = b1_ * mf[i] + (1.0 - b1_) * gf[i];
      vf[i] = b2_ * vf[i] + (1.0 - b2_) * gf[i] * gf[i];
      pf[i] -= lr_ * (mf[i] / c1) / (std::sqrt(vf[i] / c2) + eps_);
    }
  }

 private:
  LayeredParams m_, v_;
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
};

enum class Optimizer { kSgd, kAdam };

struct RegressionConfig {
  ImageFamily family = ImageFamily::kBars;
  std::size_t steps = 1500;
  std::size_t batch = 16;
  double learning_rate = 0.01;
  Optimizer optimizer = Optimizer::kAdam;
  /// Record a trajectory snapshot every this many steps (0 = only endpoints).
  std::size_t snapshot_every = 0;
};

/// Squared-error regression objective onto a synthetic family for a fixed
/// batch of (prompt, seed) requests.
inline auto regression_objective(const ToyGenerator& gen, ImageFamily family,
                                 std::vector<GenerationRequest> requests) {
  std::vector<Image> targets;
  for (const auto& rq : requests)
    targets.push_back(target_image(family, gen.latent(rq.seed), rq.prompt, gen.num_labels(),
                                   gen.arch().height, gen.arch().width));
  auto loss = [targets = std::move(targets)](std::size_t i, const Image& x, Image* dx) {
    const auto& t = targets[i];
    double s = 0.0;
    const double inv = 1.0 / static_cast<double>(x.size());
    for (std::size_t p = 0; p < x.size(); ++p) {
      const double d = x.pixels[p] - t.pixels[p];
      s += d * d;
      if (dx) dx->pixels[p] = 2.0 * d * inv;
    }
    return s * inv;
  };
  return ImageObjective<decltype(loss)>(std::move(requests), std::move(loss));
}

struct RegressionResult {
  ToyGenerator generator;
  TrainingTrajectory trajectory;
  std::vector<double> losses;
};

/// Fits the generator to the family with fresh random batches each step.
inline RegressionResult fit_generator(const ToyGenerator& start, const RegressionConfig& cfg,
                                      std::uint64_t seed) {
  require(cfg.batch >= 1, "regression batch must be positive");
  LayeredParams p = start.params();
  RegressionResult out{start, {}, {}};
  out.trajectory.append(0, p);
  Adam adam(p.layout(), cfg.learning_rate);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    std::vector<GenerationRequest> rq;
    for (std::size_t b = 0; b < cfg.batch; ++b)
      rq.push_back({static_cast<Label>(b % start.num_labels()), derive(seed, {t, b})});
    const auto obj = regression_objective(start, cfg.family, std::move(rq));
    double loss = 0.0;
    const LayeredParams g = grad_params(obj, start, &loss, &p);
    out.losses.push_back(loss);
    if (cfg.optimizer == Optimizer::kAdam)
      adam.step(p, g);
    else
      p.axpy(-cfg.learning_rate, g);
    if (!p.all_finite())
      fail(ErrorKind::kTrainingFailure, "regression diverged at step " + std::to_string(t));
    const bool last = t + 1 == cfg.steps;
    if (last || (cfg.snapshot_every && (t + 1) % cfg.snapshot_every == 0))
      out.trajectory.append(static_cast<std::int64_t>(t + 1), p);
  }
  out.trajectory.set_metadata(family_name(cfg.family), cfg.learning_rate);
  out.generator = start.with_params(std::move(p));
  return out;
}

/// A pretrained base generator on the bar family.
inline ToyGenerator pretrained_generator(const GeneratorArch& arch, std::uint64_t seed,
                                         std::size_t steps = 1500) {
  RegressionConfig cfg;
  cfg.family = ImageFamily::kBars;
  cfg.steps = steps;
  cfg.learning_rate = 0.01;
  return fit_generator(ToyGenerator::random_init(arch, seed), cfg, derive(seed, {0xbace}))
      .generator;
}

}  // namespace wmcert

#endif  // WMCERT_SYNTHETIC_HPP_
