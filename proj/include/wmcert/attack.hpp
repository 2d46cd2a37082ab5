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

// Watermark-removal attacks on the toy generator: perturbation directions
// and landscape sweeps, projected gradient attacks in parameter space,
// fine-tuning drift, compression, and the image-space audit score. Attacks
// never modify their input; they return new generators.

#ifndef WMCERT_ATTACK_HPP_
#define WMCERT_ATTACK_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "wmcert/embed.hpp"
#include "wmcert/error.hpp"
#include "wmcert/image.hpp"
#include "wmcert/parallel.hpp"
#include "wmcert/params.hpp"
#include "wmcert/rng.hpp"
#include "wmcert/synthetic.hpp"
#include "wmcert/toymodel.hpp"

namespace wmcert {

/// Evaluates a verification metric (in [0, 1]) on a generator.
using GeneratorMetric = std::function<double(const ToyGenerator&)>;

struct TracePoint {
  double budget = 0.0;
  double metric = 0.0;
};

struct AttackResult {
  std::string kind;
  std::vector<TracePoint> trace;
  ToyGenerator generator;   // attacked model at the last budget point
  double l2_norm = 0.0;     // of the final parameter delta
  double mahalanobis = -1.0;  // of the final delta; -1 when no spec was given
  bool diverged = false;
  bool fallback = false;
  std::uint64_t seed = 0;
};

/// Unit-norm random sign vector: entries +-1/sqrt(D).
inline LayeredParams random_direction(const Layout& layout, std::uint64_t seed) {
  LayeredParams d(layout);
  const double v = 1.0 / std::sqrt(static_cast<double>(layout.total_dim()));
  auto f = d.flat();
  const std::uint64_t key = derive(seed, {0xd1});
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = (mix64(key ^ mix64(i)) >> 63) ? v : -v;
  return d;
}

/// Removal surrogate: mean negative log posterior of the prompt's own class
/// on a fixed batch of generated samples. Lowering it moves probability
/// away from the watermark target.
template <DifferentiableClassifier C>
struct RemovalLoss {
  const C* clf;
  Label prompt;
  std::vector<std::uint64_t> clf_seeds;

  double operator()(std::size_t i, const Image& x, Image* dx) const {
    std::vector<Image> grads;
    const auto e = clf->energies(x, clf_seeds[i], dx ? &grads : nullptr);
    const auto lp = log_gibbs(e);
    if (dx) {
      // d(-log p_y)/dE_c = [c == y] - p_c
      for (double& v : dx->pixels) v = 0.0;
      for (std::size_t c = 0; c < e.size(); ++c) {
        const double w = (c == prompt ? 1.0 : 0.0) - std::exp(lp[c]);
        for (std::size_t k = 0; k < dx->size(); ++k) dx->pixels[k] += w * grads[c].pixels[k];
      }
    }
    return -lp[prompt];
  }
};

template <DifferentiableClassifier C>
ImageObjective<RemovalLoss<C>> removal_objective(const C& clf, Label prompt, std::size_t batch,
                                                 std::uint64_t seed) {
  std::vector<GenerationRequest> rq;
  std::vector<std::uint64_t> cs;
  for (std::size_t j = 0; j < batch; ++j) {
    rq.push_back({prompt, derive(seed, {0xa77, j})});
    cs.push_back(derive(seed, {0xa78, j}));
  }
  return ImageObjective<RemovalLoss<C>>(std::move(rq), RemovalLoss<C>{&clf, prompt, cs});
}

/// Geometry for normalised steps and projection: raw L2, or Mahalanobis
/// (work in whitened coordinates delta / (k sigma_l)).
struct Geometry {
  std::optional<NoiseSpec> spec;

  double norm(const LayeredParams& d) const {
    return spec ? mahalanobis_norm(d, *spec) : d.l2_norm();
  }
  /// Steepest-descent direction of unit norm for gradient g.
  LayeredParams descent(const LayeredParams& g) const {
    LayeredParams d = g;
    if (spec)
      for (std::size_t l = 0; l < d.num_blocks(); ++l) {
        const double s2 = spec->scaled(l) * spec->scaled(l);
        for (double& v : d.block(l)) v *= s2;
      }
    const double n = norm(d);
    if (n > 0.0) d *= -1.0 / n;
    return d;
  }
  LayeredParams project(LayeredParams d, double radius) const {
    const double n = norm(d);
    if (n > radius && n > 0.0) d *= radius / n;
    return d;
  }
};

struct DescentTrace {
  std::vector<double> loss;
  LayeredParams delta;
  bool zero_gradient = false;
};

/// Normalised projected descent on objective(theta + delta) with step
/// halving until the loss does not increase, so the trace is monotone.
template <ParamObjective O>
DescentTrace projected_descent(const O& objective, const ToyGenerator& gen,
                               const Geometry& geom, double radius, std::size_t steps,
                               double step_size) {
  DescentTrace tr;
  tr.delta = LayeredParams(gen.layout());
  LayeredParams p = gen.params();
  double cur = objective(gen, p, nullptr);
  tr.loss.push_back(cur);
  for (std::size_t s = 0; s < steps; ++s) {
    LayeredParams g;
    p = gen.params() + tr.delta;
    cur = objective(gen, p, &g);
    if (!std::isfinite(cur) || !g.all_finite())
      fail(ErrorKind::kAttackFailure, "non-finite attack gradient at step " + std::to_string(s));
    if (g.l2_norm() == 0.0) {
      tr.zero_gradient = s == 0;
      break;
    }
    const LayeredParams dir = geom.descent(g);
    double h = step_size;
    bool moved = false;
    for (int bt = 0; bt < 20; ++bt, h *= 0.5) {
      LayeredParams cand = tr.delta;
      cand.axpy(h, dir);
      cand = geom.project(std::move(cand), radius);
      const double v = objective(gen, gen.params() + cand, nullptr);
      if (std::isfinite(v) && v <= cur) {
        tr.delta = std::move(cand);
        cur = v;
        moved = true;
        break;
      }
    }
    tr.loss.push_back(cur);
    if (!moved) break;
  }
  return tr;
}

struct AdversarialDirection {
  LayeredParams direction;
  std::vector<double> loss_trace;
  bool fallback = false;  // gradient vanished; random direction returned
};

/// Unit L2 direction that degrades verification: the normalised displacement
/// after `steps` descent steps on the removal surrogate.
template <DifferentiableClassifier C>
AdversarialDirection adversarial_direction(const ToyGenerator& gen, const C& clf,
                                           Label prompt, std::size_t steps, std::uint64_t seed,
                                           double step_size = 0.05, std::size_t batch = 8) {
  const auto obj = removal_objective(clf, prompt, batch, seed);
  const auto tr = projected_descent(obj, gen, Geometry{}, std::numeric_limits<double>::infinity(),
                                    steps, step_size);
  AdversarialDirection out;
  out.loss_trace = tr.loss;
  const double n = tr.delta.l2_norm();
  if (tr.zero_gradient || n == 0.0) {
    out.direction = random_direction(gen.layout(), seed);
    out.fallback = true;
    return out;
  }
  out.direction = (1.0 / n) * tr.delta;
  return out;
}

/// theta + eps_N d_N + eps_A d_A evaluated on the grid; result[i][j] for
/// eps_N[i], eps_A[j].
inline std::vector<std::vector<double>> landscape_sweep(
    const ToyGenerator& gen, const LayeredParams& d_n, const LayeredParams& d_a,
    const std::vector<double>& eps_n, const std::vector<double>& eps_a,
    const GeneratorMetric& metric) {
  std::vector<std::vector<double>> out(eps_n.size(), std::vector<double>(eps_a.size()));
  parallel_for(eps_n.size() * eps_a.size(), [&](std::size_t c) {
    const std::size_t i = c / eps_a.size(), j = c % eps_a.size();
    LayeredParams p = gen.params();
    p.axpy(eps_n[i], d_n);
    p.axpy(eps_a[j], d_a);
    out[i][j] = metric(gen.with_params(std::move(p)));
  });
  return out;
}

struct PgdConfig {
  Label prompt = 0;
  std::vector<double> budgets = {0.2, 0.4, 0.6, 0.8};
  std::size_t steps = 50;
  double step_size = 0.05;
  std::size_t batch = 8;
  std::optional<NoiseSpec> mahalanobis;  // project in this geometry instead of L2
};

/// PGD on the removal surrogate, one independent run per budget. The
/// returned generator is the one at the largest budget.
template <DifferentiableClassifier C>
AttackResult pgd_attack(const ToyGenerator& gen, const C& clf, const PgdConfig& cfg,
                        std::uint64_t seed, const GeneratorMetric& metric = {}) {
  require(std::is_sorted(cfg.budgets.begin(), cfg.budgets.end()) &&
              std::adjacent_find(cfg.budgets.begin(), cfg.budgets.end()) == cfg.budgets.end(),
          "PGD budgets must be strictly increasing");
  for (double b : cfg.budgets) require(b >= 0.0, "PGD budgets must be nonnegative");
  const auto obj = removal_objective(clf, cfg.prompt, cfg.batch, seed);
  const Geometry geom{cfg.mahalanobis};
  AttackResult res;
  res.kind = cfg.mahalanobis ? "pgd-mahalanobis" : "pgd";
  res.seed = seed;
  res.generator = gen;
  LayeredParams last(gen.layout());
  for (double b : cfg.budgets) {
    LayeredParams delta(gen.layout());
    if (b > 0.0) {
      try {
        delta = projected_descent(obj, gen, geom, b, cfg.steps, cfg.step_size).delta;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kAttackFailure) throw;
        res.diverged = true;
      }
    }
    ToyGenerator attacked = gen.with_params(gen.params() + delta);
    res.trace.push_back({b, metric ? metric(attacked) : 0.0});
    res.generator = std::move(attacked);
    last = std::move(delta);
  }
  res.l2_norm = last.l2_norm();
  if (cfg.mahalanobis) res.mahalanobis = mahalanobis_norm(last, *cfg.mahalanobis);
  return res;
}

struct FinetuneResult {
  AttackResult attack;
  TrainingTrajectory trajectory;
};

/// Benign drift: plain gradient descent regression on a surrogate image
/// family, snapshots every `snapshot_every` steps.
inline FinetuneResult finetune_drift(const ToyGenerator& gen, ImageFamily task,
                                     std::size_t steps, double lr, std::uint64_t seed,
                                     std::size_t snapshot_every = 0,
                                     const GeneratorMetric& metric = {}) {
  FinetuneResult out;
  out.attack.kind = "finetune";
  out.attack.seed = seed;
  if (steps == 0) {
    out.attack.generator = gen;
    out.trajectory.append(0, gen.params());
    out.trajectory.set_metadata(family_name(task), lr);
    out.attack.trace.push_back({0.0, metric ? metric(gen) : 0.0});
    return out;
  }
  RegressionConfig cfg;
  cfg.family = task;
  cfg.steps = steps;
  cfg.learning_rate = lr;
  cfg.optimizer = Optimizer::kSgd;
  cfg.snapshot_every = snapshot_every;
  auto fit = fit_generator(gen, cfg, seed);
  out.trajectory = std::move(fit.trajectory);
  for (const auto& snap : out.trajectory.snapshots())
    out.attack.trace.push_back({static_cast<double>(snap.step),
                                metric ? metric(gen.with_params(snap.params)) : 0.0});
  out.attack.generator = std::move(fit.generator);
  out.attack.l2_norm = (out.attack.generator.params() - gen.params()).l2_norm();
  return out;
}

/// Per-block uniform quantisation to 2^bits levels over [min, max].
inline ToyGenerator quantize(const ToyGenerator& gen, int bits) {
  require(bits >= 1 && bits <= 16, "quantisation bits must lie in [1, 16]");
  LayeredParams p = gen.params();
  const double levels = std::exp2(bits) - 1.0;
  for (std::size_t l = 0; l < p.num_blocks(); ++l) {
    auto b = p.block(l);
    const auto [mn, mx] = std::minmax_element(b.begin(), b.end());
    const double lo = *mn, range = *mx - *mn;
    if (range == 0.0) continue;
    const double step = range / levels;
    for (double& v : b) v = lo + std::round((v - lo) / step) * step;
  }
  return gen.with_params(std::move(p));
}

/// Zeroes floor(fraction * d_l) smallest-magnitude entries per block; ties
/// go to the lower index.
inline ToyGenerator prune(const ToyGenerator& gen, double fraction) {
  require(fraction >= 0.0 && fraction < 1.0, "prune fraction must lie in [0, 1)");
  LayeredParams p = gen.params();
  for (std::size_t l = 0; l < p.num_blocks(); ++l) {
    auto b = p.block(l);
    const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(b.size())));
    if (k == 0) continue;
    std::vector<std::size_t> idx(b.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t x, std::size_t y) { return std::abs(b[x]) < std::abs(b[y]); });
    for (std::size_t i = 0; i < k; ++i) b[idx[i]] = 0.0;
  }
  return gen.with_params(std::move(p));
}

/// Mean pairwise MSE among n generations of a prompt.
inline double within_prompt_distance(const ToyGenerator& gen, Label prompt, std::size_t n,
                                     std::uint64_t seed) {
  require(n >= 2, "need at least two images");
  std::vector<Image> imgs;
  for (std::size_t j = 0; j < n; ++j) imgs.push_back(gen.generate(prompt, derive(seed, {0xa0d, j})));
  double s = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j, ++pairs) s += mse(imgs[i], imgs[j]);
  return s / static_cast<double>(pairs);
}

/// |M(p+) - M(p-)| / M(p-) with shared seeds for both prompts.
inline double image_suspiciousness(const ToyGenerator& gen, Label prompt_plus,
                                   Label prompt_minus, std::size_t n_images,
                                   std::uint64_t seed) {
  const double mp = within_prompt_distance(gen, prompt_plus, n_images, seed);
  const double mm = within_prompt_distance(gen, prompt_minus, n_images, seed);
  if (!(mm > 0.0))
    fail(ErrorKind::kDegenerate, "reference prompt generations are all identical");
  return std::abs(mp - mm) / mm;
}

}  // namespace wmcert

#endif  // WMCERT_ATTACK_HPP_
