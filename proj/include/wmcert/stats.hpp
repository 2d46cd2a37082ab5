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

// Distribution functions, confidence bounds and the paired t statistic used by
// the verification and certification procedures.

#ifndef WMCERT_STATS_HPP_
#define WMCERT_STATS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>

#include "wmcert/error.hpp"
#include "wmcert/rng.hpp"

namespace wmcert::stats {

/// Standard normal CDF via erfc; absolute error is at the level of double
/// rounding (well below 1e-15) on the whole real line.
inline double phi(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

namespace detail {

using wmcert::detail::normal_quantile_guess;

}  // namespace detail

/// Inverse of phi on (0, 1).
inline double phi_inv(double p) {
  if (!(p > 0.0 && p < 1.0))
    fail(ErrorKind::kDomain, "phi_inv requires p in (0, 1), got " + std::to_string(p));
  if (p == 0.5) return 0.0;
  double x = detail::normal_quantile_guess(p);
  // Halley refinement against the erfc-based CDF. Work in the smaller tail so
  // the residual is computed without cancellation.
  for (int it = 0; it < 3; ++it) {
    const double e = (x < 0.0) ? phi(x) - p : (1.0 - p) - phi(-x);
    const double u = e / normal_pdf(x);
    const double step = u / (1.0 + 0.5 * x * u);
    x -= step;
    if (std::abs(step) <= 1e-15 * std::max(1.0, std::abs(x))) break;
  }
  return x;
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 200000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  fail(ErrorKind::kNumeric, "incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b); y = 1 - x is passed separately so
/// callers can supply it without cancellation.
inline double ibeta(double a, double b, double x, double y) {
  require(a > 0.0 && b > 0.0, "ibeta requires a, b > 0", ErrorKind::kDomain);
  if (x <= 0.0) return 0.0;
  if (y <= 0.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                     a * std::log(x) + b * std::log(y);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * detail::betacf(a, b, x) / a;
  return 1.0 - bt * detail::betacf(b, a, y) / b;
}
inline double ibeta(double a, double b, double x) { return ibeta(a, b, x, 1.0 - x); }

/// Student-t CDF with dof degrees of freedom.
inline double t_cdf(double t, double dof) {
  require(dof > 0.0, "t_cdf requires dof > 0", ErrorKind::kDomain);
  if (t == 0.0) return 0.5;
  const double t2 = t * t;
  const double x = dof / (dof + t2);
  const double y = t2 / (dof + t2);
  const double tail = 0.5 * ibeta(0.5 * dof, 0.5, x, y);
  return t > 0.0 ? 1.0 - tail : tail;
}

inline double t_pdf(double t, double dof) {
  const double lg = std::lgamma(0.5 * (dof + 1.0)) - std::lgamma(0.5 * dof) -
                    0.5 * std::log(dof * std::numbers::pi);
  return std::exp(lg - 0.5 * (dof + 1.0) * std::log1p(t * t / dof));
}

/// Quantile of the Student-t distribution by safeguarded Newton iteration on
/// t_cdf, starting from the normal quantile.
inline double t_quantile(double p, std::int64_t dof) {
  if (!(p > 0.0 && p < 1.0))
    fail(ErrorKind::kDomain, "t_quantile requires p in (0, 1)");
  require(dof >= 1, "t_quantile requires dof >= 1", ErrorKind::kDomain);
  if (p == 0.5) return 0.0;
  if (p < 0.5) return -t_quantile(1.0 - p, dof);
  const double nu = static_cast<double>(dof);
  // Upper-tail target avoids cancellation for p close to 1.
  const double q = 1.0 - p;
  auto upper = [&](double t) { return 0.5 * ibeta(0.5 * nu, 0.5, nu / (nu + t * t), t * t / (nu + t * t)); };

  const double z = phi_inv(p);
  double x = z + (z * z * z + z) / (4.0 * nu);
  double lo = 0.0, hi = std::max(1.0, 2.0 * x);
  while (upper(hi) > q) {
    lo = hi;
    hi *= 2.0;
    if (!std::isfinite(hi)) fail(ErrorKind::kNumeric, "t_quantile bracket overflow");
  }
  if (!(x > lo && x < hi)) x = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    const double f = upper(x) - q;  // decreasing in x
    if (f == 0.0) return x;
    if (f > 0.0)
      lo = x;
    else
      hi = x;
    double next = x + f / t_pdf(x, nu);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 1e-12 * std::max(1.0, std::abs(x))) return next;
    x = next;
  }
  return x;
}

inline double log_choose(std::int64_t n, std::int64_t k) {
  return std::lgamma(static_cast<double>(n) + 1.0) -
         std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

namespace detail {

// log P(X = i) for X ~ Binomial(n, p0), 0 < p0 < 1.
inline double binom_log_pmf(std::int64_t i, std::int64_t n, double p0) {
  return log_choose(n, i) + static_cast<double>(i) * std::log(p0) +
         static_cast<double>(n - i) * std::log1p(-p0);
}

inline double log_sum_range(std::int64_t from, std::int64_t to, std::int64_t n, double p0) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::int64_t i = from; i <= to; ++i) mx = std::max(mx, binom_log_pmf(i, n, p0));
  double s = 0.0;
  for (std::int64_t i = from; i <= to; ++i) s += std::exp(binom_log_pmf(i, n, p0) - mx);
  return std::exp(mx + std::log(s));
}

inline void check_binom(std::int64_t k, std::int64_t n, double p0) {
  require(n >= 0 && k >= 0 && k <= n, "binomial tail requires 0 <= k <= n");
  require(p0 >= 0.0 && p0 <= 1.0, "binomial tail requires p0 in [0, 1]");
}

}  // namespace detail

/// Exact P(X >= k) for X ~ Binomial(n, p0), summed in log space.
inline double binom_sf(std::int64_t k, std::int64_t n, double p0) {
  detail::check_binom(k, n, p0);
  if (k == 0) return 1.0;
  if (p0 == 0.0) return 0.0;
  if (p0 == 1.0) return 1.0;
  return std::min(1.0, detail::log_sum_range(k, n, n, p0));
}

/// Exact P(X <= k); k = -1 gives 0.
inline double binom_cdf(std::int64_t k, std::int64_t n, double p0) {
  if (k < 0) return 0.0;
  detail::check_binom(k, n, p0);
  if (k == n) return 1.0;
  if (p0 == 0.0) return 1.0;
  if (p0 == 1.0) return 0.0;
  return std::min(1.0, detail::log_sum_range(0, k, n, p0));
}

enum class BoundSide { kLower, kUpper };

struct ConfidenceBound {
  double point_estimate = 0.0;
  double bound = 0.0;
  BoundSide side = BoundSide::kLower;
  double confidence = 0.0;
  std::int64_t n = 0;
};

/// Deviation sqrt(ln(1/delta) / (2n)) shared by the one-sided DKW and
/// Hoeffding bounds.
inline double one_sided_slack(std::int64_t n, double delta) {
  require(n >= 1, "confidence bound needs n >= 1");
  require(delta > 0.0 && delta < 1.0, "confidence bound needs delta in (0, 1)");
  return std::sqrt(std::log(1.0 / delta) / (2.0 * static_cast<double>(n)));
}

/// One-sided DKW lower confidence bound on an empirical CDF/survival value.
inline ConfidenceBound dkw_lower(double empirical, std::int64_t n, double delta) {
  require(empirical >= 0.0 && empirical <= 1.0, "empirical value must be in [0, 1]");
  return {empirical, std::max(0.0, empirical - one_sided_slack(n, delta)),
          BoundSide::kLower, 1.0 - delta, n};
}

/// One-sided Hoeffding upper confidence bound on the mean of [0,1] variables.
inline ConfidenceBound hoeffding_upper(double empirical, std::int64_t n, double delta) {
  require(empirical >= 0.0 && empirical <= 1.0, "empirical value must be in [0, 1]");
  return {empirical, std::min(1.0, empirical + one_sided_slack(n, delta)),
          BoundSide::kUpper, 1.0 - delta, n};
}

enum class TStatus { kFinite, kInfiniteReject, kDegenerateNonReject };

struct PairedT {
  double t = 0.0;  // +inf for kInfiniteReject, 0 for kDegenerateNonReject
  double dbar = 0.0;
  double s_d = 0.0;
  TStatus status = TStatus::kFinite;

  /// One-sided test against critical value t_alpha.
  bool rejects(double t_alpha) const {
    switch (status) {
      case TStatus::kInfiniteReject: return true;
      case TStatus::kDegenerateNonReject: return false;
      case TStatus::kFinite: return t > t_alpha;
    }
    return false;
  }
};

/// T = sqrt(N) * mean(d) / s_d with the (N-1)-denominator sample deviation.
/// Zero spread resolves by the sign of the mean.
inline PairedT paired_t_statistic(std::span<const double> d) {
  if (d.size() < 2)
    fail(ErrorKind::kInsufficientSamples, "paired t statistic needs N >= 2");
  const double n = static_cast<double>(d.size());
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  PairedT out;
  out.dbar = mean;
  out.s_d = std::sqrt(ss / (n - 1.0));
  if (out.s_d == 0.0) {
    if (mean > 0.0) {
      out.status = TStatus::kInfiniteReject;
      out.t = std::numeric_limits<double>::infinity();
    } else {
      out.status = TStatus::kDegenerateNonReject;
      out.t = 0.0;
    }
    return out;
  }
  out.t = std::sqrt(n) * mean / out.s_d;
  return out;
}

/// Plug-in approximation s_D^2 ~ (WR(1-WR) + RP(1-RP)) / M.
inline double plugin_paired_variance(double wr, double rp, std::int64_t m) {
  require(m >= 1, "plug-in variance needs M >= 1");
  return (wr * (1.0 - wr) + rp * (1.0 - rp)) / static_cast<double>(m);
}

}  // namespace wmcert::stats

#endif  // WMCERT_STATS_HPP_
