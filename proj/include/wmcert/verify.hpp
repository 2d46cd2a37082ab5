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

// Ownership verification under parameter smoothing: the watermark rate of a
// suspect generator against a reference rate, the closed-form decision
// threshold, the paired t-test, and per-image exact sign tests.

#ifndef WMCERT_VERIFY_HPP_
#define WMCERT_VERIFY_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wmcert/error.hpp"
#include "wmcert/image.hpp"
#include "wmcert/parallel.hpp"
#include "wmcert/params.hpp"
#include "wmcert/rng.hpp"
#include "wmcert/stats.hpp"
#include "wmcert/toymodel.hpp"

namespace wmcert {

template <class C>
concept LabelPredictor = requires(const C& c, const Image& x, std::uint64_t s) {
  { c.predict(x, s) } -> std::convertible_to<Label>;
};

template <class C>
concept PosteriorModel = requires(const C& c, const Image& x, std::uint64_t s) {
  { c.posterior(x, s) } -> std::convertible_to<std::vector<double>>;
};

/// hits[i * N + j] = 1 if sample j under noise draw i was classified as the
/// target. Row i shares one parameter-noise draw.
struct IndicatorMatrix {
  std::size_t M = 0, N = 0;
  std::vector<std::uint8_t> hits;

  bool at(std::size_t i, std::size_t j) const { return hits[i * N + j] != 0; }

  double mean() const {
    std::size_t s = 0;
    for (auto h : hits) s += h;
    return static_cast<double>(s) / static_cast<double>(hits.size());
  }
  /// Mean over noise draws for each sample j.
  std::vector<double> per_sample() const {
    std::vector<double> out(N, 0.0);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) out[j] += hits[i * N + j];
    for (double& v : out) v /= static_cast<double>(M);
    return out;
  }
  /// Mean over samples for each noise draw i.
  std::vector<double> per_trial() const {
    std::vector<double> out(M, 0.0);
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < N; ++j) out[i] += hits[i * N + j];
      out[i] /= static_cast<double>(N);
    }
    return out;
  }
};

struct SmoothingQuery {
  Label prompt = 0;  // prompt used to generate the verification samples
  Label target = 1;  // class counted as a watermark hit
  std::size_t M = 100;
  std::size_t N = 100;
};

/// Noise draw i is keyed by (seed, i); sample j of draw i uses latent and
/// classifier seeds keyed by (seed, i, j). Two generators evaluated with the
/// same seed therefore see identical noise, latents and classifier draws.
template <LabelPredictor C>
IndicatorMatrix smoothed_indicators(const ToyGenerator& gen, const C& clf,
                                    const NoiseSpec& noise, const SmoothingQuery& q,
                                    std::uint64_t seed) {
  require(q.M >= 1 && q.N >= 1, "need M >= 1 and N >= 1");
  require(noise.layout == gen.layout(), "noise spec layout does not match the generator");
  IndicatorMatrix out{q.M, q.N, std::vector<std::uint8_t>(q.M * q.N, 0)};
  const std::uint64_t noise_seed = derive(seed, {0x401});
  parallel_for(q.M, [&](std::size_t i) {
    LayeredParams p = gen.params();
    p += sample_noise(noise, noise_seed, i);
    for (std::size_t j = 0; j < q.N; ++j) {
      const Image img = gen.generate_with(p, q.prompt, derive(seed, {0x1a7, i, j}));
      out.hits[i * q.N + j] = clf.predict(img, derive(seed, {0xc1a, i, j})) == q.target;
    }
  });
  return out;
}

struct RateEstimate {
  double value = 0.0;
  std::vector<double> per_sample;
  IndicatorMatrix matrix;
};

template <LabelPredictor C>
RateEstimate watermark_robustness(const ToyGenerator& gen, const C& clf,
                                  const NoiseSpec& noise, const SmoothingQuery& q,
                                  std::uint64_t seed) {
  RateEstimate r;
  r.matrix = smoothed_indicators(gen, clf, noise, q, seed);
  r.per_sample = r.matrix.per_sample();
  r.value = r.matrix.mean();
  return r;
}

/// Same estimator on the reference generator. Use the suspect's seed to pair
/// the noise draws.
template <LabelPredictor C>
RateEstimate reference_probability(const ToyGenerator& ref, const C& clf,
                                   const NoiseSpec& noise, const SmoothingQuery& q,
                                   std::uint64_t seed) {
  return watermark_robustness(ref, clf, noise, q, seed);
}

/// f(WR) = MN (WR - zeta)^2 - t^2 (WR(1 - WR) + zeta(1 - zeta)); expanded this
/// is (MN + t^2) WR^2 - (2 MN zeta + t^2) WR + MN zeta^2 - t^2 zeta + t^2 zeta^2.
inline double threshold_quadratic(double wr, double mn, double zeta, double t) {
  const double d = wr - zeta;
  return mn * d * d - t * t * (wr * (1.0 - wr) + zeta * (1.0 - zeta));
}

/// Larger root of the threshold quadratic for critical value t.
inline double closed_form_threshold_t(std::size_t M, std::size_t N, double zeta, double t) {
  require(M >= 1 && N >= 1, "threshold needs M, N >= 1");
  require(zeta > 0.0 && zeta < 1.0, "zeta must lie in (0, 1)");
  const double mn = static_cast<double>(M) * static_cast<double>(N);
  const double t2 = t * t;
  if (!(mn * (1.0 - zeta) > t2 * zeta))
    fail(ErrorKind::kInfeasibleThreshold,
         "no threshold: MN(1 - zeta) <= t^2 zeta (increase M or N)");
  const double a = mn + t2;
  const double b = 2.0 * mn * zeta + t2;
  // b^2 - 4ac with the MN^2 terms cancelled analytically; the expanded form
  // loses everything to rounding once t^2 << MN.
  const double v = zeta * (1.0 - zeta);
  const double gamma = t2 * (8.0 * mn * v + t2 * (1.0 + 4.0 * v));
  if (!(gamma >= 0.0)) fail(ErrorKind::kDomain, "negative discriminant in threshold");
  return std::clamp((b + std::sqrt(gamma)) / (2.0 * a), zeta, 1.0);
}

/// tau_{alpha, zeta} with t the (1 - alpha) quantile of Student-t, N - 1 dof.
inline double closed_form_threshold(std::size_t M, std::size_t N, double zeta, double alpha) {
  require(N >= 2, "threshold needs N >= 2 for the t quantile",
          ErrorKind::kInsufficientSamples);
  require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
  const double t = stats::t_quantile(1.0 - alpha, static_cast<std::int64_t>(N) - 1);
  return closed_form_threshold_t(M, N, zeta, t);
}

enum class Decision { kWatermarked, kNotWatermarked };

inline std::string decision_name(Decision d) {
  return d == Decision::kWatermarked ? "watermarked" : "not-watermarked";
}

struct VerificationReport {
  double wr = 0.0, rp = 0.0;
  std::vector<double> per_sample_wr, per_sample_rp;
  std::size_t M = 0, N = 0;
  double alpha = 0.05;
  double zeta = 0.0;
  double tau = 1.0;
  bool threshold_feasible = false;
  stats::PairedT t_test;
  double t_critical = 0.0;
  bool threshold_route = false;  // WR > tau
  bool t_route = false;          // paired t-test rejects
  bool routes_disagree = false;
  Decision decision = Decision::kNotWatermarked;
};

/// Both routes must agree for a positive decision; disagreement is reported.
/// An infeasible threshold regime yields a negative decision.
inline VerificationReport decide_ownership(std::span<const double> wr_samples,
                                           std::span<const double> rp_samples, double alpha,
                                           double zeta, std::size_t M) {
  require(wr_samples.size() == rp_samples.size(), "sample lists must have equal length");
  if (wr_samples.size() < 2)
    fail(ErrorKind::kInsufficientSamples, "ownership decision needs N >= 2");
  VerificationReport r;
  r.per_sample_wr.assign(wr_samples.begin(), wr_samples.end());
  r.per_sample_rp.assign(rp_samples.begin(), rp_samples.end());
  r.N = wr_samples.size();
  r.M = M;
  r.alpha = alpha;
  r.zeta = zeta;
  std::vector<double> d(r.N);
  for (std::size_t j = 0; j < r.N; ++j) {
    r.wr += wr_samples[j];
    r.rp += rp_samples[j];
    d[j] = wr_samples[j] - rp_samples[j];
  }
  r.wr /= static_cast<double>(r.N);
  r.rp /= static_cast<double>(r.N);
  r.t_test = stats::paired_t_statistic(d);
  r.t_critical = stats::t_quantile(1.0 - alpha, static_cast<std::int64_t>(r.N) - 1);
  r.t_route = r.t_test.rejects(r.t_critical);
  try {
    r.tau = closed_form_threshold_t(M, r.N, zeta, r.t_critical);
    r.threshold_feasible = true;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kInfeasibleThreshold && e.kind() != ErrorKind::kInvalidArgument)
      throw;
    r.tau = 1.0;
    r.threshold_feasible = false;
  }
  r.threshold_route = r.threshold_feasible && r.wr > r.tau;
  r.routes_disagree = r.threshold_route != r.t_route;
  r.decision = (r.threshold_route && r.t_route) ? Decision::kWatermarked
                                                : Decision::kNotWatermarked;
  return r;
}

struct VerifyConfig {
  SmoothingQuery query;
  double alpha = 0.05;
  double delta = 0.05;  // confidence for the reference-rate bound
};

/// Full verification: paired WR/RP estimation, zeta as the Hoeffding upper
/// bound on the reference rate over the M independent noise trials, then the
/// decision.
template <LabelPredictor C>
VerificationReport verify_ownership(const ToyGenerator& suspect, const ToyGenerator& reference,
                                    const C& clf, const NoiseSpec& noise,
                                    const VerifyConfig& cfg, std::uint64_t seed) {
  const auto wr = watermark_robustness(suspect, clf, noise, cfg.query, seed);
  const auto rp = reference_probability(reference, clf, noise, cfg.query, seed);
  const double zeta = stats::hoeffding_upper(rp.value, static_cast<std::int64_t>(cfg.query.M),
                                             cfg.delta)
                          .bound;
  return decide_ownership(wr.per_sample, rp.per_sample, cfg.alpha, zeta, cfg.query.M);
}

// ---------------------------------------------------------------------------
// Sign test

struct SignTest {
  std::size_t wins = 0;
  std::size_t trials = 0;
  double p_value = 1.0;
  bool detected = false;
};

/// Exact one-sided binomial sign test on strict wins of a over b (ties count
/// as non-wins).
inline SignTest sign_test(std::span<const double> a, std::span<const double> b,
                          double fpr_cap = 1e-6) {
  require(a.size() == b.size(), "sign test needs paired lists");
  SignTest s;
  s.trials = a.size();
  for (std::size_t i = 0; i < a.size(); ++i) s.wins += a[i] > b[i];
  s.p_value = stats::binom_sf(static_cast<std::int64_t>(s.wins),
                              static_cast<std::int64_t>(s.trials), 0.5);
  s.detected = s.trials > 0 && s.p_value < fpr_cap;
  return s;
}

/// Detected fraction over images; conf[image][trial].
inline double sign_test_tpr(const std::vector<std::vector<double>>& conf_watermarked,
                            const std::vector<std::vector<double>>& conf_clean,
                            double fpr_cap = 1e-6) {
  require(conf_watermarked.size() == conf_clean.size(), "confidence tables differ in size");
  if (conf_watermarked.empty()) return 0.0;
  std::size_t det = 0;
  for (std::size_t i = 0; i < conf_watermarked.size(); ++i)
    det += sign_test(conf_watermarked[i], conf_clean[i], fpr_cap).detected;
  return static_cast<double>(det) / static_cast<double>(conf_watermarked.size());
}

/// Target-class confidence per image and trial. Image j uses a latent keyed
/// by (image_seed, j); trial t shares one noise draw across images and uses a
/// classifier seed keyed by (trial_seed, t, j).
template <PosteriorModel C>
std::vector<std::vector<double>> target_confidences(const ToyGenerator& gen, const C& clf,
                                                    const NoiseSpec& noise, Label prompt,
                                                    Label target, std::size_t n_images,
                                                    std::size_t trials,
                                                    std::uint64_t image_seed,
                                                    std::uint64_t trial_seed) {
  std::vector<std::vector<double>> conf(n_images, std::vector<double>(trials));
  const std::uint64_t noise_seed = derive(trial_seed, {0x401});
  parallel_for(trials, [&](std::size_t t) {
    LayeredParams p = gen.params();
    p += sample_noise(noise, noise_seed, t);
    for (std::size_t j = 0; j < n_images; ++j) {
      const Image img = gen.generate_with(p, prompt, derive(image_seed, {0x1a9, j}));
      conf[j][t] = clf.posterior(img, derive(trial_seed, {0xc1b, t, j})).at(target);
    }
  });
  return conf;
}

}  // namespace wmcert

#endif  // WMCERT_VERIFY_HPP_
