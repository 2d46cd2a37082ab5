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

// Certified radius under layer-adaptive Gaussian smoothing. The smoothed
// verification statistic is lower-bounded through a threshold grid with
// finite-sample survival probabilities; the bound is pushed through the
// Gaussian type-II error curve and inverted for the largest radius that stays
// above the verification threshold.

#ifndef WMCERT_CERTIFY_HPP_
#define WMCERT_CERTIFY_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wmcert/error.hpp"
#include "wmcert/params.hpp"
#include "wmcert/rng.hpp"
#include "wmcert/stats.hpp"
#include "wmcert/verify.hpp"

namespace wmcert {

inline constexpr double kProbabilityClamp = 1e-12;

/// Type-II error of the most powerful test between N(0, I) and N(delta, I)
/// at level 1 - p, as a function of r = ||delta||.
struct GaussianBeta2 {
  double operator()(double p, double r) const {
    return stats::phi(stats::phi_inv(p) - r);
  }
};

inline double gaussian_beta2(double p, double r) {
  require(r >= 0.0, "radius must be nonnegative");
  return GaussianBeta2{}(p, r);
}

struct ThresholdGrid {
  double a = 0.0, b = 1.0;
  std::vector<double> s;
  std::vector<double> p_lower;
  std::vector<double> p_empirical;  // raw survival fractions, for reporting
  std::size_t n = 0;                // observations behind the bounds
  double delta = 0.0;               // confidence spent on the bounds

  std::size_t size() const noexcept { return s.size(); }

  void validate() const {
    require(!s.empty(), "threshold grid is empty");
    require(s.size() == p_lower.size(), "grid thresholds and probabilities differ in size");
    require(a <= b, "grid range must satisfy a <= b");
    double prev = a;
    for (std::size_t j = 0; j < s.size(); ++j) {
      require(s[j] >= prev && s[j] <= b, "grid thresholds must be sorted within [a, b]");
      prev = s[j];
      require(p_lower[j] >= 0.0 && p_lower[j] <= 1.0, "grid probabilities must lie in [0, 1]");
      if (j > 0) require(p_lower[j] <= p_lower[j - 1], "grid probabilities must not increase");
    }
  }
};

/// Thresholds at the empirical j/m quantiles (order statistic ceil(j n / m))
/// of the observed statistic; probabilities are DKW lower bounds on the
/// survival fraction P(stat >= s_j), made non-increasing.
inline ThresholdGrid build_grid(std::span<const double> statistics, std::size_t m,
                                double delta, double a = 0.0, double b = 1.0) {
  require(m >= 1, "grid needs m >= 1");
  if (statistics.size() < m)
    fail(ErrorKind::kInsufficientSamples,
         "grid needs at least m = " + std::to_string(m) + " observations");
  std::vector<double> sorted(statistics.begin(), statistics.end());
  std::sort(sorted.begin(), sorted.end());
  for (double v : sorted) require(v >= a && v <= b, "statistic outside [a, b]");
  const std::size_t n = sorted.size();
  ThresholdGrid g;
  g.a = a;
  g.b = b;
  g.n = n;
  g.delta = delta;
  for (std::size_t j = 1; j <= m; ++j) {
    const std::size_t idx = (j * n + m - 1) / m;  // 1-based
    const double sj = sorted[idx - 1];
    const auto first = std::lower_bound(sorted.begin(), sorted.end(), sj);
    const double surv =
        static_cast<double>(sorted.end() - first) / static_cast<double>(n);
    g.s.push_back(sj);
    g.p_empirical.push_back(surv);
    double pl = stats::dkw_lower(surv, static_cast<std::int64_t>(n), delta).bound;
    if (!g.p_lower.empty()) pl = std::min(pl, g.p_lower.back());
    g.p_lower.push_back(pl);
  }
  return g;
}

/// a + (s_1 - a) beta2(P_1, r/k) + sum_j (s_j - s_{j-1}) beta2(P_j, r/k).
/// Probabilities are clamped into (eps, 1 - eps); *clamped reports whether
/// that happened.
template <class Beta2 = GaussianBeta2>
double certified_lhs(const ThresholdGrid& g, double r, double k, bool* clamped = nullptr,
                     Beta2 beta2 = {}) {
  require(r >= 0.0, "radius must be nonnegative");
  require(k > 0.0, "noise scale k must be positive");
  double out = g.a, prev = g.a;
  bool any = false;
  for (std::size_t j = 0; j < g.s.size(); ++j) {
    double p = g.p_lower[j];
    if (p < kProbabilityClamp || p > 1.0 - kProbabilityClamp) {
      p = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
      any = true;
    }
    const double w = g.s[j] - prev;
    if (w > 0.0) out += w * beta2(p, r / k);
    prev = g.s[j];
  }
  if (clamped) *clamped = any;
  return out;
}

enum class RadiusSearch { kBisection, kGridScan };

struct RadiusSolution {
  double r_star = 0.0;
  bool certified = false;  // false when lhs(0) <= tau
  bool unbounded = false;  // lhs stays above tau up to the search cap
  std::size_t evaluations = 0;
};

/// Largest r with certified_lhs(r) > tau. Bisection relies on strict
/// monotonicity; the scan mode walks r in steps of `tolerance` as a
/// cross-check.
template <class Beta2 = GaussianBeta2>
RadiusSolution solve_radius(const ThresholdGrid& g, double tau, double k,
                            double tolerance = 1e-6,
                            RadiusSearch mode = RadiusSearch::kBisection, Beta2 beta2 = {}) {
  g.validate();
  require(tolerance > 0.0, "solver tolerance must be positive");
  RadiusSolution sol;
  auto lhs = [&](double r) {
    ++sol.evaluations;
    return certified_lhs(g, r, k, nullptr, beta2);
  };
  if (!(lhs(0.0) > tau)) return sol;
  sol.certified = true;
  constexpr double kCap = 1e6;
  if (mode == RadiusSearch::kGridScan) {
    double r = 0.0;
    while (r + tolerance <= kCap && lhs(r + tolerance) > tau) r += tolerance;
    sol.r_star = r;
    sol.unbounded = r + tolerance > kCap;
    return sol;
  }
  double lo = 0.0, hi = 1.0;
  while (lhs(hi) > tau) {
    lo = hi;
    hi *= 2.0;
    if (hi > kCap) {
      sol.r_star = lo;
      sol.unbounded = true;
      return sol;
    }
  }
  while (hi - lo > tolerance) {
    const double mid = 0.5 * (lo + hi);
    (lhs(mid) > tau ? lo : hi) = mid;
  }
  sol.r_star = lo;
  return sol;
}

struct CertifyConfig {
  SmoothingQuery query;     // M trials of N generations each
  std::size_t grid_size = 100;
  double alpha = 0.05;
  double delta = 0.05;      // split evenly between the grid and zeta bounds
  double tolerance = 1e-6;
};

struct Certificate {
  ThresholdGrid grid;
  double tau = 1.0;
  double zeta = 0.0;
  double rp = 0.0;          // mean reference statistic
  double wr = 0.0;          // mean suspect statistic
  double k = 1.0;
  double r_star = 0.0;
  bool certified = false;
  std::string status;       // "certified", "below-threshold", "infeasible-threshold"
  double confidence = 0.0;  // 1 - delta overall
  double delta_grid = 0.0, delta_zeta = 0.0;
  double lhs_at_r_star = 0.0;
  double tolerance = 1e-6;
  std::uint64_t seed = 0;
  CertifyConfig config;
  NoiseSpec noise;
};

/// Certificate from already-measured per-trial statistics.
inline Certificate certify_from_statistics(std::span<const double> suspect_stats,
                                           std::span<const double> reference_stats,
                                           const NoiseSpec& noise, const CertifyConfig& cfg) {
  Certificate c;
  c.config = cfg;
  c.noise = noise;
  c.k = noise.scale;
  c.tolerance = cfg.tolerance;
  c.delta_grid = cfg.delta / 2.0;
  c.delta_zeta = cfg.delta / 2.0;
  c.confidence = 1.0 - cfg.delta;
  c.grid = build_grid(suspect_stats, cfg.grid_size, c.delta_grid);
  for (double v : suspect_stats) c.wr += v;
  c.wr /= static_cast<double>(suspect_stats.size());
  for (double v : reference_stats) c.rp += v;
  c.rp /= static_cast<double>(reference_stats.size());
  c.zeta = stats::hoeffding_upper(c.rp, static_cast<std::int64_t>(reference_stats.size()),
                                  c.delta_zeta)
               .bound;
  try {
    c.tau = closed_form_threshold(cfg.query.M, cfg.query.N, c.zeta, cfg.alpha);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kInfeasibleThreshold && e.kind() != ErrorKind::kInvalidArgument)
      throw;
    c.status = "infeasible-threshold";
    c.tau = 1.0;
    return c;
  }
  const auto sol = solve_radius(c.grid, c.tau, c.k, cfg.tolerance);
  c.certified = sol.certified;
  c.r_star = sol.r_star;
  c.lhs_at_r_star = certified_lhs(c.grid, c.r_star, c.k);
  c.status = sol.certified ? "certified" : "below-threshold";
  return c;
}

/// End-to-end: M paired noise trials on suspect and reference, each trial's
/// statistic being the fraction of N generations classified as the target.
template <LabelPredictor C>
Certificate certify(const ToyGenerator& suspect, const C& clf, const ToyGenerator& reference,
                    const NoiseSpec& noise, const CertifyConfig& cfg, std::uint64_t seed) {
  require(suspect.layout() == noise.layout && reference.layout() == noise.layout,
          "models and noise spec must share one layout");
  const auto ws = smoothed_indicators(suspect, clf, noise, cfg.query, seed).per_trial();
  const auto rs = smoothed_indicators(reference, clf, noise, cfg.query, seed).per_trial();
  Certificate c = certify_from_statistics(ws, rs, noise, cfg);
  c.seed = seed;
  return c;
}

// ---------------------------------------------------------------------------
// Tightness construction

/// The worst-case statistic h* for a shift of norm r. With u the projection
/// of the noise onto the shift direction, likelihood-ratio regions become
/// half-lines u < c_j, c_j = Phi^-1(P_j): h* takes s_m below c_m, s_j on
/// [c_{j+1}, c_j) and a above c_1. Using u directly also covers r = 0, where
/// the likelihood ratio is constant and the regions need randomisation.
class WorstCaseClassifier {
 public:
  WorstCaseClassifier(ThresholdGrid grid, double shift_norm)
      : grid_(std::move(grid)), r_(shift_norm) {
    grid_.validate();
    require(r_ >= 0.0, "shift norm must be nonnegative");
    for (double p : grid_.p_lower)
      cuts_.push_back(stats::phi_inv(std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp)));
  }

  const ThresholdGrid& grid() const noexcept { return grid_; }
  double shift_norm() const noexcept { return r_; }

  /// h*(u): highest s_j whose cut lies above u.
  double value(double u) const {
    double v = grid_.a;
    for (std::size_t j = 0; j < cuts_.size(); ++j)
      if (u < cuts_[j]) v = grid_.s[j];
    return v;
  }

  struct MonteCarlo {
    double mean = 0.0;
    double std_error = 0.0;
  };

  /// Mean of h*(Z') with Z' ~ N(r, 1) along the shift direction.
  MonteCarlo shifted_mean(std::size_t draws, std::uint64_t seed) const {
    return mean_at(r_, draws, seed);
  }

  /// Fractions P0(h* >= s_j) under the unshifted distribution.
  std::vector<double> null_exceedance(std::size_t draws, std::uint64_t seed) const {
    std::vector<double> cnt(cuts_.size(), 0.0);
    Stream s(derive(seed, {0x0a11}));
    for (std::size_t d = 0; d < draws; ++d) {
      const double h = value(s.normal());
      for (std::size_t j = 0; j < cuts_.size(); ++j) cnt[j] += h >= grid_.s[j];
    }
    for (double& c : cnt) c /= static_cast<double>(draws);
    return cnt;
  }

 private:
  MonteCarlo mean_at(double shift, std::size_t draws, std::uint64_t seed) const {
    Stream s(derive(seed, {0x5a1f}));
    double sum = 0.0, sq = 0.0;
    for (std::size_t d = 0; d < draws; ++d) {
      const double h = value(shift + s.normal());
      sum += h;
      sq += h * h;
    }
    const double n = static_cast<double>(draws);
    MonteCarlo mc;
    mc.mean = sum / n;
    const double var = std::max(0.0, sq / n - mc.mean * mc.mean);
    mc.std_error = std::sqrt(var / n);
    return mc;
  }

  ThresholdGrid grid_;
  double r_;
  std::vector<double> cuts_;
};

inline WorstCaseClassifier worst_case_classifier(const ThresholdGrid& grid, double shift_norm) {
  return WorstCaseClassifier(grid, shift_norm);
}

}  // namespace wmcert

#endif  // WMCERT_CERTIFY_HPP_
