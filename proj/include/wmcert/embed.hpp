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

// Watermark embedding: pushes the classifier's posterior on samples of the
// watermark prompt toward a target distribution while an MS-SSIM term keeps
// the generator close to its frozen reference. Gradients are averaged over
// parameter-noise draws whose count and regularisation weight grow on a
// doubling schedule.

#ifndef WMCERT_EMBED_HPP_
#define WMCERT_EMBED_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "wmcert/error.hpp"
#include "wmcert/image.hpp"
#include "wmcert/msssim.hpp"
#include "wmcert/parallel.hpp"
#include "wmcert/params.hpp"
#include "wmcert/rng.hpp"
#include "wmcert/toymodel.hpp"

namespace wmcert {

inline constexpr double kPosteriorFloor = 1e-12;

struct EmbedConfig {
  Label prompt = 0;  // prompt whose samples carry the watermark
  Label target = 1;  // class the private classifier should lean towards
  double lambda = 0.55;
  /// Explicit target posterior; when empty it is built from lambda.
  std::vector<double> target_posterior;
  double omega0 = 5e-5;
  double doubling_period = 33.0;  // T_g, in steps
  std::size_t m_max = 64;
  std::size_t fixed_draws = 0;  // nonzero: use this many draws at every step
  std::size_t steps = 200;
  double learning_rate = 1e-3;
  std::size_t batch = 8;
  NoiseSpec noise;

  /// q* with mass lambda on target and 1 - lambda on prompt.
  std::vector<double> q_star(std::size_t num_labels) const {
    if (!target_posterior.empty()) return target_posterior;
    std::vector<double> q(num_labels, 0.0);
    q.at(prompt) = 1.0 - lambda;
    q.at(target) = lambda;
    return q;
  }

  void validate(std::size_t num_labels) const {
    require(prompt < num_labels && target < num_labels, "embed prompt/target out of range",
            ErrorKind::kInvalidConfiguration);
    require(prompt != target, "embed target must differ from the watermark prompt",
            ErrorKind::kInvalidConfiguration);
    if (target_posterior.empty()) {
      require(lambda > 0.5 && lambda < 1.0, "lambda must lie in (0.5, 1)",
              ErrorKind::kInvalidConfiguration);
    } else {
      require(target_posterior.size() == num_labels, "target posterior has the wrong size",
              ErrorKind::kInvalidConfiguration);
      double s = 0.0;
      for (double q : target_posterior) {
        require(q >= 0.0, "target posterior must be nonnegative",
                ErrorKind::kInvalidConfiguration);
        s += q;
      }
      require(std::abs(s - 1.0) < 1e-9, "target posterior must sum to 1",
              ErrorKind::kInvalidConfiguration);
    }
    require(omega0 >= 0.0, "omega0 must be nonnegative", ErrorKind::kInvalidConfiguration);
    require(doubling_period > 0.0, "doubling period must be positive",
            ErrorKind::kInvalidConfiguration);
    require(m_max >= 1, "m_max must be at least 1", ErrorKind::kInvalidConfiguration);
    require(learning_rate > 0.0, "learning rate must be positive",
            ErrorKind::kInvalidConfiguration);
    require(batch >= 1, "batch must be at least 1", ErrorKind::kInvalidConfiguration);
    noise.validate();
  }
};

struct ScheduleStep {
  std::size_t m = 1;
  double omega = 0.0;
};

/// m_t = min(m_max, floor(2^(t / T_g))), omega_t = omega0 * 2^(t / T_g).
/// fixed_draws overrides m_t (baseline for timing comparisons).
inline ScheduleStep schedule(std::size_t t, const EmbedConfig& cfg) {
  const double g = std::exp2(static_cast<double>(t) / cfg.doubling_period);
  const double m = std::floor(g);
  ScheduleStep s;
  s.m = m >= static_cast<double>(cfg.m_max) ? cfg.m_max : static_cast<std::size_t>(m);
  if (cfg.fixed_draws > 0) s.m = cfg.fixed_draws;
  s.omega = cfg.omega0 * g;
  return s;
}

/// sum_c q_c (log q_c - log p_c) with log p supplied directly.
inline double kl_from_log(std::span<const double> q, std::span<const double> log_p) {
  double s = 0.0;
  for (std::size_t c = 0; c < q.size(); ++c)
    if (q[c] > 0.0) s += q[c] * (std::log(q[c]) - log_p[c]);
  return std::max(s, 0.0);
}

/// KL(q || p) for a probability vector p, floored at kPosteriorFloor.
inline double kl_divergence(std::span<const double> q, std::span<const double> p) {
  std::vector<double> lp(p.size());
  for (std::size_t c = 0; c < p.size(); ++c) lp[c] = std::log(std::max(p[c], kPosteriorFloor));
  return kl_from_log(q, lp);
}

/// log softmax(-E).
inline std::vector<double> log_gibbs(std::span<const double> energies) {
  const double mn = *std::min_element(energies.begin(), energies.end());
  double z = 0.0;
  for (double e : energies) z += std::exp(-(e - mn));
  const double lz = std::log(z);
  std::vector<double> out(energies.size());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = -(energies[c] - mn) - lz;
  return out;
}

/// Classifiers usable for embedding: energies with optional input gradients.
template <class C>
concept DifferentiableClassifier = requires(const C& c, const Image& x, std::uint64_t s,
                                            std::vector<Image>* g) {
  { c.energies(x, s, g) } -> std::convertible_to<std::vector<double>>;
  { c.num_labels() } -> std::convertible_to<std::size_t>;
};

/// Image loss KL(q* || p(.|x)), evaluated in log space so the floor never
/// truncates the gradient; d/dE_c = q_c - p_c.
template <DifferentiableClassifier C>
struct KlImageLoss {
  const C* clf;
  std::vector<double> q;
  std::vector<std::uint64_t> clf_seeds;

  double operator()(std::size_t i, const Image& x, Image* dx) const {
    std::vector<Image> grads;
    const auto e = clf->energies(x, clf_seeds[i], dx ? &grads : nullptr);
    const auto lp = log_gibbs(e);
    if (dx) {
      for (double& v : dx->pixels) v = 0.0;
      for (std::size_t c = 0; c < e.size(); ++c) {
        const double w = q[c] - std::exp(lp[c]);
        for (std::size_t k = 0; k < dx->size(); ++k) dx->pixels[k] += w * grads[c].pixels[k];
      }
    }
    return kl_from_log(q, lp);
  }
};

/// Image loss 1 - MS-SSIM(x, reference image).
struct SsimImageLoss {
  std::vector<Image> references;
  SsimOptions options;

  double operator()(std::size_t i, const Image& x, Image* dx) const {
    const double v = ms_ssim(x, references[i], options, dx);
    if (dx)
      for (double& g : dx->pixels) g = -g;
    return 1.0 - v;
  }
};

template <DifferentiableClassifier C>
using KlObjective = ImageObjective<KlImageLoss<C>>;
using SsimObjective = ImageObjective<SsimImageLoss>;

/// KL term over `batch` samples of the watermark prompt.
template <DifferentiableClassifier C>
KlObjective<C> make_kl_objective(const C& clf, const EmbedConfig& cfg, std::uint64_t seed) {
  std::vector<GenerationRequest> rq;
  std::vector<std::uint64_t> cs;
  for (std::size_t j = 0; j < cfg.batch; ++j) {
    rq.push_back({cfg.prompt, derive(seed, {0x6b6c, j})});
    cs.push_back(derive(seed, {0xc1f, j}));
  }
  return KlObjective<C>(std::move(rq), KlImageLoss<C>{&clf, cfg.q_star(clf.num_labels()), cs});
}

/// Fidelity term over every prompt with seeds paired against the reference.
inline SsimObjective make_ssim_objective(const ToyGenerator& reference, const EmbedConfig& cfg,
                                         std::uint64_t seed) {
  std::vector<GenerationRequest> rq;
  SsimImageLoss loss;
  for (Label y = 0; y < reference.num_labels(); ++y)
    for (std::size_t j = 0; j < cfg.batch; ++j) {
      const std::uint64_t s = derive(seed, {0x551, y, j});
      rq.push_back({y, s});
      loss.references.push_back(reference.generate(y, s));
    }
  return SsimObjective(std::move(rq), std::move(loss));
}

template <DifferentiableClassifier C>
double kl_loss(const ToyGenerator& gen, const C& clf, const EmbedConfig& cfg,
               std::uint64_t seed) {
  return make_kl_objective(clf, cfg, seed)(gen, gen.params(), nullptr);
}

inline double ssim_loss(const ToyGenerator& gen, const ToyGenerator& reference,
                        const EmbedConfig& cfg, std::uint64_t seed) {
  require(gen.arch().height == reference.arch().height &&
              gen.arch().width == reference.arch().width,
          "generators have different output shapes");
  return make_ssim_objective(reference, cfg, seed)(gen, gen.params(), nullptr);
}

/// L_KL + omega * L_ssim as one differentiable objective.
template <DifferentiableClassifier C>
WeightedSum<KlObjective<C>, SsimObjective> embedding_objective(const C& clf,
                                                               const ToyGenerator& reference,
                                                               const EmbedConfig& cfg,
                                                               std::uint64_t seed,
                                                               double omega) {
  return {make_kl_objective(clf, cfg, seed), make_ssim_objective(reference, cfg, seed), 1.0,
          omega};
}

struct EmbedLogRecord {
  std::size_t t = 0;
  std::size_t m = 0;
  double omega = 0.0;
  double kl = 0.0;
  double ssim = 0.0;
  double grad_norm = 0.0;
};

struct EmbedResult {
  ToyGenerator generator;
  std::vector<EmbedLogRecord> log;
};

/// Mean of gradients computed as g_0 + sum_i (g_i - g_0) / m, so identical
/// draws reproduce the single-draw gradient bit for bit.
inline LayeredParams average_gradients(const std::vector<LayeredParams>& grads) {
  require(!grads.empty(), "no gradients to average");
  LayeredParams out = grads[0];
  const double inv = 1.0 / static_cast<double>(grads.size());
  auto of = out.flat();
  for (std::size_t i = 1; i < grads.size(); ++i) {
    const auto gi = grads[i].flat();
    const auto g0 = grads[0].flat();
    for (std::size_t k = 0; k < of.size(); ++k) of[k] += (gi[k] - g0[k]) * inv;
  }
  return out;
}

/// Smoothed gradient of an objective: m noise draws keyed by (seed, i),
/// evaluated at theta + eps_i. Values of the two components are averaged too.
template <DifferentiableClassifier C>
LayeredParams smoothed_gradient(const WeightedSum<KlObjective<C>, SsimObjective>& objective,
                                const ToyGenerator& gen, const LayeredParams& theta,
                                const NoiseSpec& noise, std::size_t m, std::uint64_t seed,
                                double* kl_mean, double* ssim_mean) {
  std::vector<LayeredParams> grads(m);
  std::vector<double> kl(m), ss(m);
  parallel_for(m, [&](std::size_t i) {
    LayeredParams p = theta;
    p += sample_noise(noise, seed, i);
    LayeredParams gk, gs;
    kl[i] = objective.a(gen, p, &gk);
    ss[i] = objective.b(gen, p, &gs);
    gk.axpy(objective.weight_b, gs);
    grads[i] = std::move(gk);
  });
  if (kl_mean) *kl_mean = std::accumulate(kl.begin(), kl.end(), 0.0) / static_cast<double>(m);
  if (ssim_mean) *ssim_mean = std::accumulate(ss.begin(), ss.end(), 0.0) / static_cast<double>(m);
  return average_gradients(grads);
}

/// Runs the embedding. The descent step is applied to the clean parameters;
/// noise only enters where the gradient is evaluated. `on_step` (optional)
/// sees each log record as it is produced.
template <DifferentiableClassifier C>
EmbedResult embed(const ToyGenerator& gen, const C& clf, const EmbedConfig& cfg,
                  std::uint64_t seed,
                  const std::function<void(const EmbedLogRecord&)>& on_step = {}) {
  cfg.validate(gen.num_labels());
  require(cfg.noise.layout == gen.layout(), "noise spec layout does not match the generator",
          ErrorKind::kInvalidConfiguration);
  const ToyGenerator reference = gen;
  LayeredParams theta = gen.params();
  EmbedResult out{gen, {}};
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const ScheduleStep sch = schedule(t, cfg);
    const std::uint64_t step_seed = derive(seed, {0x5e9, t});
    const auto objective = embedding_objective(clf, reference, cfg, step_seed, sch.omega);
    EmbedLogRecord rec{t, sch.m, sch.omega, 0.0, 0.0, 0.0};
    const LayeredParams g = smoothed_gradient(objective, gen, theta, cfg.noise, sch.m,
                                              derive(step_seed, {0x401}), &rec.kl, &rec.ssim);
    rec.grad_norm = g.l2_norm();
    if (!std::isfinite(rec.kl) || !std::isfinite(rec.ssim) || !std::isfinite(rec.grad_norm))
      fail(ErrorKind::kTrainingFailure,
           "embedding diverged at step " + std::to_string(t));
    theta.axpy(-cfg.learning_rate, g);
    if (!theta.all_finite())
      fail(ErrorKind::kTrainingFailure,
           "embedding produced non-finite parameters at step " + std::to_string(t));
    out.log.push_back(rec);
    if (on_step) on_step(rec);
  }
  out.generator = gen.with_params(std::move(theta));
  return out;
}

}  // namespace wmcert

#endif  // WMCERT_EMBED_HPP_
