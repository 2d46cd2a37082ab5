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

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "toy_fixture.hpp"
#include "wmcert/certify.hpp"

namespace wmcert {
namespace {

ThresholdGrid SingleThreshold(double p) {
  ThresholdGrid g;
  g.s = {1.0};
  g.p_lower = {p};
  return g;
}

ThresholdGrid RandomGrid(std::mt19937_64& rng, std::size_t m) {
  std::uniform_real_distribution<double> u(0, 1);
  ThresholdGrid g;
  for (std::size_t j = 0; j < m; ++j) {
    g.s.push_back(u(rng));
    g.p_lower.push_back(u(rng));
  }
  std::sort(g.s.begin(), g.s.end());
  std::sort(g.p_lower.rbegin(), g.p_lower.rend());
  return g;
}

TEST(Beta2Test, Examples) {
  EXPECT_NEAR(gaussian_beta2(0.3, 0.0), 0.3, 1e-14);
  // Phi(1.2815516 - 1) by direct erfc.
  EXPECT_NEAR(gaussian_beta2(0.9, 1.0), 0.5 * std::erfc(-(1.2815515655446004 - 1.0) / std::sqrt(2.0)),
              1e-12);
  EXPECT_NEAR(gaussian_beta2(0.9, 1.0), 0.6109, 5e-5);
  EXPECT_THROW(gaussian_beta2(0.5, -1.0), Error);
}

TEST(Beta2Test, StrictlyDecreasing) {
  for (double p : {0.01, 0.3, 0.7, 0.999}) {
    double prev = gaussian_beta2(p, 0.0);
    for (double r = 0.1; r < 5; r += 0.1) {
      const double v = gaussian_beta2(p, r);
      EXPECT_LT(v, prev);
      prev = v;
    }
  }
}

TEST(Beta2Test, LikelihoodRatioSimulation) {
  // The most powerful level-(1-p) test of N(0,1) vs N(r,1) in direction of
  // the shift accepts H0 when z < Phi^-1(p); type-II error under the shift.
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0, 1);
  const int draws = 40000;
  for (double p : {0.2, 0.6, 0.95})
    for (double r : {0.0, 0.5, 1.5}) {
      const double c = stats::phi_inv(p);
      int acc = 0;
      for (int i = 0; i < draws; ++i) acc += (r + n(rng)) < c;
      const double est = double(acc) / draws;
      const double se = std::sqrt(std::max(est * (1 - est), 1e-4) / draws);
      EXPECT_NEAR(gaussian_beta2(p, r), est, 3 * se) << p << " " << r;
    }
}

TEST(LhsTest, RiemannSumAtZero) {
  ThresholdGrid g;
  g.a = 0.1;
  g.s = {0.2, 0.5, 0.9};
  g.p_lower = {0.8, 0.5, 0.1};
  EXPECT_NEAR(certified_lhs(g, 0.0, 1.0), 0.1 + 0.1 * 0.8 + 0.3 * 0.5 + 0.4 * 0.1, 1e-14);
}

TEST(LhsTest, SingleThresholdCollapses) {
  const auto g = SingleThreshold(0.8);
  for (double r : {0.0, 0.3, 2.0}) EXPECT_NEAR(certified_lhs(g, r, 1.0), gaussian_beta2(0.8, r), 1e-15);
  EXPECT_NEAR(certified_lhs(g, 1.0, 2.0), gaussian_beta2(0.8, 0.5), 1e-15);
}

TEST(LhsTest, LowerBoundsDiscreteMean) {
  // X uniform on {0, 0.25, 0.5, 0.75, 1}: any sub-grid with exact survival
  // gives a lower Riemann sum, equality on the full support.
  const std::vector<double> support{0.0, 0.25, 0.5, 0.75, 1.0};
  const double mean = 0.5;
  auto survival = [&](double s) {
    int c = 0;
    for (double x : support) c += x >= s;
    return c / 5.0;
  };
  for (unsigned mask = 1; mask < 32; ++mask) {
    ThresholdGrid g;
    for (int k = 0; k < 5; ++k)
      if (mask & (1u << k)) {
        g.s.push_back(support[k]);
        g.p_lower.push_back(survival(support[k]));
      }
    EXPECT_LE(certified_lhs(g, 0.0, 1.0), mean + 1e-15);
  }
  ThresholdGrid full;
  full.s = {0.25, 0.5, 0.75, 1.0};
  for (double s : full.s) full.p_lower.push_back(survival(s));
  EXPECT_NEAR(certified_lhs(full, 0.0, 1.0), mean, 1e-15);
}

TEST(LhsTest, ClampedProbabilitiesAreFlagged) {
  ThresholdGrid g;
  g.s = {0.5, 1.0};
  g.p_lower = {1.0, 0.0};
  bool clamped = false;
  const double v = certified_lhs(g, 0.5, 1.0, &clamped);
  EXPECT_TRUE(clamped);
  EXPECT_TRUE(std::isfinite(v));
  certified_lhs(SingleThreshold(0.5), 0.5, 1.0, &clamped);
  EXPECT_FALSE(clamped);
}

TEST(LhsTest, StrictlyDecreasingOnRandomGrids) {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 50; ++k) {
    const auto g = RandomGrid(rng, 1 + rng() % 30);
    if (g.s.back() <= g.a) continue;
    double prev = certified_lhs(g, 0.0, 1.0);
    for (double r = 0.05; r < 4; r += 0.05) {
      const double v = certified_lhs(g, r, 1.0);
      EXPECT_LT(v, prev);
      prev = v;
    }
  }
}

TEST(RadiusTest, NoCertificateBelowThreshold) {
  const auto sol = solve_radius(SingleThreshold(0.4), 0.5, 1.0);
  EXPECT_FALSE(sol.certified);
  EXPECT_EQ(sol.r_star, 0.0);
}

TEST(RadiusTest, SingleThresholdClosedForm) {
  const auto sol = solve_radius(SingleThreshold(0.99), 0.5, 1.0);
  EXPECT_TRUE(sol.certified);
  EXPECT_NEAR(sol.r_star, 2.3263478740, 1e-5);
  for (double P : {0.6, 0.9, 0.999})
    for (double tau : {0.1, 0.3, 0.55})
      for (double k : {0.5, 1.0, 3.0}) {
        if (P <= tau) continue;
        const double expect = k * (stats::phi_inv(P) - stats::phi_inv(tau));
        EXPECT_NEAR(solve_radius(SingleThreshold(P), tau, k).r_star, expect, 1e-5);
      }
}

TEST(RadiusTest, DoublingKDoublesRadius) {
  const double r1 = solve_radius(SingleThreshold(0.95), 0.4, 1.0, 1e-9).r_star;
  const double r2 = solve_radius(SingleThreshold(0.95), 0.4, 2.0, 1e-9).r_star;
  EXPECT_NEAR(r2, 2 * r1, 3e-9);
}

TEST(RadiusTest, BracketsTheCrossing) {
  std::mt19937_64 rng(2);
  for (int k = 0; k < 40; ++k) {
    const auto g = RandomGrid(rng, 1 + rng() % 20);
    const double tau = 0.5 * certified_lhs(g, 0.0, 1.0);
    const auto sol = solve_radius(g, tau, 1.0, 1e-6);
    if (!sol.certified) continue;
    EXPECT_GT(certified_lhs(g, sol.r_star, 1.0), tau);
    EXPECT_LE(certified_lhs(g, sol.r_star + 1e-6, 1.0), tau);
    const auto scan = solve_radius(g, tau, 1.0, 1e-3, RadiusSearch::kGridScan);
    EXPECT_NEAR(scan.r_star, sol.r_star, 1.1e-3);
  }
}

TEST(RadiusTest, MonotoneInProbabilitiesAndTau) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 40; ++k) {
    auto g = RandomGrid(rng, 5);
    const double tau = 0.3 * certified_lhs(g, 0.0, 1.0);
    const double r0 = solve_radius(g, tau, 1.0).r_star;
    EXPECT_GE(r0, solve_radius(g, tau * 1.2, 1.0).r_star);
    for (double& p : g.p_lower) p = std::min(1.0, p + 0.05);
    EXPECT_GE(solve_radius(g, tau, 1.0).r_star, r0);
  }
}

TEST(RadiusTest, InvalidGridRejected) {
  ThresholdGrid g;
  g.s = {0.5, 0.2};
  g.p_lower = {0.9, 0.8};
  EXPECT_THROW(solve_radius(g, 0.1, 1.0), Error);
  g.s = {0.2, 0.5};
  g.p_lower = {0.5, 0.8};
  EXPECT_THROW(solve_radius(g, 0.1, 1.0), Error);
}

TEST(GridTest, DegenerateSample) {
  std::vector<double> ones(200, 1.0);
  const auto g = build_grid(ones, 100, 0.025);
  const double slack = std::sqrt(std::log(1 / 0.025) / 400.0);
  for (std::size_t j = 0; j < g.size(); ++j) {
    EXPECT_EQ(g.s[j], 1.0);
    EXPECT_NEAR(g.p_lower[j], 1.0 - slack, 1e-15);
  }
  // Only the first threshold carries width.
  EXPECT_NEAR(certified_lhs(g, 0.0, 1.0), 1.0 - slack, 1e-14);
}

TEST(GridTest, QuantilesAndBounds) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> x(1000);
  for (auto& v : x) v = u(rng);
  const auto g = build_grid(x, 100, 0.05);
  ASSERT_EQ(g.size(), 100u);
  EXPECT_NO_THROW(g.validate());
  std::vector<double> sorted = x;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t j = 1; j <= 100; ++j) {
    EXPECT_EQ(g.s[j - 1], sorted[(j * 1000 + 99) / 100 - 1]);
    EXPECT_GE(g.p_empirical[j - 1], g.p_lower[j - 1]);
    const double surv = std::count_if(x.begin(), x.end(), [&](double v) { return v >= g.s[j - 1]; }) / 1000.0;
    EXPECT_EQ(g.p_empirical[j - 1], surv);
  }
  EXPECT_THROW(build_grid(std::vector<double>(10, 0.5), 100, 0.05), Error);
}

TEST(GridTest, IsotonicClamp) {
  std::mt19937_64 rng(5);
  for (int k = 0; k < 20; ++k) {
    std::vector<double> x(150);
    for (auto& v : x) v = (rng() % 7) / 6.0;
    const auto g = build_grid(x, 100, 0.05);
    for (std::size_t j = 1; j < g.size(); ++j) EXPECT_LE(g.p_lower[j], g.p_lower[j - 1]);
  }
}

TEST(CertifyTest, FromStatisticsRecordsInputs) {
  std::vector<double> sus(200), ref(200);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 200; ++i) {
    sus[i] = 0.7 + 0.3 * u(rng);
    ref[i] = 0.1 * u(rng);
  }
  CertifyConfig cfg;
  cfg.query = {0, 1, 200, 50};
  const auto noise = NoiseSpec::uniform(Layout({3, 4}), 0.01, 2.0);
  const auto c = certify_from_statistics(sus, ref, noise, cfg);
  EXPECT_EQ(c.status, "certified");
  EXPECT_TRUE(c.certified);
  EXPECT_GT(c.r_star, 0.0);
  EXPECT_EQ(c.k, 2.0);
  EXPECT_NEAR(c.delta_grid + c.delta_zeta, cfg.delta, 1e-15);
  EXPECT_NEAR(c.confidence, 0.95, 1e-15);
  EXPECT_GE(c.lhs_at_r_star, c.tau);
  EXPECT_LE(c.lhs_at_r_star - c.tau, 1e-4);
}

TEST(CertifyTest, SameModelNoCertificate) {
  const auto& w = testing::toy_world();
  CertifyConfig cfg;
  cfg.query = {0, 1, 60, 10};
  cfg.grid_size = 30;
  const auto c = certify(w.base, w.clf, w.base, w.noise, cfg, 7);
  EXPECT_TRUE(!c.certified || c.r_star == 0.0);
  EXPECT_EQ(c.seed, 7u);
}

// Target for images with visible structure, prompt otherwise.
struct StructurePredictor {
  Label predict(const Image& x, std::uint64_t) const {
    double m = 0, v = 0;
    for (double p : x.pixels) m += p;
    m /= x.size();
    for (double p : x.pixels) v += (p - m) * (p - m);
    return v / x.size() > 1e-3 ? 1 : 0;
  }
};

TEST(CertifyTest, ScriptedClassifierCertifies) {
  const auto& w = testing::toy_world();
  LayeredParams zero(w.base.layout());
  const ToyGenerator flat = w.base.with_params(zero);
  CertifyConfig cfg;
  cfg.query = {0, 1, 100, 5};
  const auto c = certify(w.base, StructurePredictor{}, flat, w.noise, cfg, 9);
  EXPECT_EQ(c.rp, 0.0);
  EXPECT_EQ(c.wr, 1.0);
  ASSERT_TRUE(c.certified);
  EXPECT_GT(c.r_star, 0.0);
  EXPECT_GE(c.lhs_at_r_star - c.tau, 0.0);
  EXPECT_LE(certified_lhs(c.grid, c.r_star + c.tolerance, c.k) - c.tau, 1e-6);
}

TEST(CertifyTest, InfeasibleThresholdIsResultNotException) {
  std::vector<double> sus(10, 1.0), ref(10, 0.9);
  CertifyConfig cfg;
  cfg.query = {0, 1, 10, 2};
  cfg.grid_size = 5;
  const auto c = certify_from_statistics(sus, ref, NoiseSpec::uniform(Layout({2}), 0.1), cfg);
  EXPECT_EQ(c.status, "infeasible-threshold");
  EXPECT_FALSE(c.certified);
}

TEST(WorstCaseTest, NoShiftMatchesLhsAtZero) {
  std::mt19937_64 rng(8);
  const auto g = RandomGrid(rng, 10);
  const auto h = worst_case_classifier(g, 0.0);
  const auto mc = h.shifted_mean(100000, 1);
  EXPECT_NEAR(mc.mean, certified_lhs(g, 0.0, 1.0), 3 * mc.std_error);
}

TEST(WorstCaseTest, SingleThresholdShiftOne) {
  const auto h = worst_case_classifier(SingleThreshold(0.9), 1.0);
  const auto mc = h.shifted_mean(100000, 2);
  EXPECT_NEAR(mc.mean, gaussian_beta2(0.9, 1.0), 3 * mc.std_error);
}

TEST(WorstCaseTest, NullConstraintsAndTightness) {
  std::mt19937_64 rng(9);
  const std::size_t draws = 100000;
  for (int k = 0; k < 5; ++k) {
    const auto g = RandomGrid(rng, 8);
    const double r = 2.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    const auto h = worst_case_classifier(g, r);
    const auto mc = h.shifted_mean(draws, k);
    EXPECT_NEAR(mc.mean, certified_lhs(g, r, 1.0), 3 * mc.std_error + 1e-12);
    const auto ex = h.null_exceedance(draws, k);
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double p = g.p_lower[j];
      const double se = std::sqrt(std::max(p * (1 - p), 1e-6) / draws);
      // Tied thresholds share one region: exceedance is the largest tied P.
      double expect = p;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (g.s[i] == g.s[j]) expect = std::max(expect, g.p_lower[i]);
      EXPECT_NEAR(ex[j], expect, 3 * se + 1e-12);
    }
  }
}

}  // namespace
}  // namespace wmcert
