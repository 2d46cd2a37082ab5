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
#include <numeric>
#include <set>
#include <vector>

#include "toy_fixture.hpp"
#include "wmcert/attack.hpp"
#include "wmcert/verify.hpp"

namespace wmcert {
namespace {

const testing::ToyWorld& World() { return testing::toy_world(); }

// Same energies for every input: the removal surrogate has zero gradient.
struct ConstantEnergies {
  std::size_t num_labels() const { return 2; }
  std::vector<double> energies(const Image& x, std::uint64_t, std::vector<Image>* g) const {
    if (g) g->assign(2, Image(x.height, x.width));
    return {1.0, 2.0};
  }
};

std::vector<double> Copy(const LayeredParams& p) { return {p.flat().begin(), p.flat().end()}; }

TEST(RandomDirectionTest, UnitSignVector) {
  const Layout lay = World().base.layout();
  const auto d = random_direction(lay, 3);
  EXPECT_NEAR(d.l2_norm(), 1.0, 1e-12);
  const double mag = 1.0 / std::sqrt(static_cast<double>(lay.total_dim()));
  std::size_t pos = 0;
  for (double v : d.flat()) {
    EXPECT_EQ(std::abs(v), mag);
    pos += v > 0;
  }
  const double D = lay.total_dim();
  EXPECT_NEAR(pos, D / 2, 3 * std::sqrt(D / 4));
  EXPECT_EQ(Copy(d), Copy(random_direction(lay, 3)));
  EXPECT_NE(Copy(d), Copy(random_direction(lay, 4)));
}

TEST(AdversarialDirectionTest, ZeroGradientFallsBack) {
  const auto a = adversarial_direction(World().base, ConstantEnergies{}, 0, 5, 11);
  EXPECT_TRUE(a.fallback);
  EXPECT_EQ(Copy(a.direction), Copy(random_direction(World().base.layout(), 11)));
}

TEST(AdversarialDirectionTest, MonotoneTraceAndUnitNorm) {
  const auto a = adversarial_direction(testing::toy_watermarked(), World().clf, 0, 10, 12);
  EXPECT_FALSE(a.fallback);
  EXPECT_NEAR(a.direction.l2_norm(), 1.0, 1e-12);
  ASSERT_GE(a.loss_trace.size(), 2u);
  for (std::size_t i = 1; i < a.loss_trace.size(); ++i)
    EXPECT_LE(a.loss_trace[i], a.loss_trace[i - 1]);
  EXPECT_LT(a.loss_trace.back(), a.loss_trace.front());
}

double Vsr(const ToyGenerator& g) {
  return watermark_robustness(g, World().clf, World().noise, SmoothingQuery{0, 1, 3, 6}, 77).value;
}

TEST(SweepTest, OriginBoundsAndDeterminism) {
  const auto& wm = testing::toy_watermarked();
  const auto dn = random_direction(wm.layout(), 1);
  const auto da = random_direction(wm.layout(), 2);
  const std::vector<double> en{0.0, 0.5}, ea{0.0, 0.25, 1.0};
  const auto m1 = landscape_sweep(wm, dn, da, en, ea, Vsr);
  const auto m2 = landscape_sweep(wm, dn, da, en, ea, Vsr);
  EXPECT_EQ(m1, m2);
  EXPECT_EQ(m1[0][0], Vsr(wm));
  for (const auto& row : m1)
    for (double v : row) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
}

TEST(PgdTest, BudgetsAndProjection) {
  const auto& wm = testing::toy_watermarked();
  const auto before = Copy(wm.params());
  PgdConfig cfg;
  cfg.steps = 5;
  cfg.budgets = {0.0, 0.2, 0.4};
  const auto res = pgd_attack(wm, World().clf, cfg, 5, Vsr);
  ASSERT_EQ(res.trace.size(), 3u);
  EXPECT_EQ(res.trace[0].metric, Vsr(wm));
  for (std::size_t i = 1; i < res.trace.size(); ++i) EXPECT_GT(res.trace[i].budget, res.trace[i - 1].budget);
  EXPECT_LE(res.l2_norm, 0.4 + 1e-9);
  EXPECT_FALSE(res.diverged);
  EXPECT_EQ(Copy(wm.params()), before);
  EXPECT_EQ(res.kind, "pgd");
}

TEST(PgdTest, ProjectionHoldsEveryStep) {
  const auto& wm = testing::toy_watermarked();
  const auto obj = removal_objective(World().clf, 0, 4, 3);
  for (std::size_t steps = 1; steps <= 6; ++steps) {
    const auto tr = projected_descent(obj, wm, Geometry{}, 0.3, steps, 0.2);
    EXPECT_LE(tr.delta.l2_norm(), 0.3 + 1e-9);
    for (std::size_t i = 1; i < tr.loss.size(); ++i) EXPECT_LE(tr.loss[i], tr.loss[i - 1]);
  }
}

TEST(PgdTest, MahalanobisGeometry) {
  const auto& wm = testing::toy_watermarked();
  PgdConfig cfg;
  cfg.steps = 4;
  cfg.budgets = {0.5};
  cfg.mahalanobis = World().noise;
  const auto res = pgd_attack(wm, World().clf, cfg, 6);
  EXPECT_EQ(res.kind, "pgd-mahalanobis");
  EXPECT_LE(res.mahalanobis, 0.5 + 1e-9);
  EXPECT_GT(res.mahalanobis, 0.0);
}

TEST(PgdTest, RejectsUnsortedBudgets) {
  PgdConfig cfg;
  cfg.budgets = {0.4, 0.2};
  EXPECT_THROW(pgd_attack(World().base, World().clf, cfg, 1), Error);
}

TEST(FinetuneTest, ZeroStepsIsIdentity) {
  const auto& wm = testing::toy_watermarked();
  const auto r = finetune_drift(wm, ImageFamily::kEllipses, 0, 0.05, 1);
  EXPECT_EQ(Copy(r.attack.generator.params()), Copy(wm.params()));
  EXPECT_EQ(r.trajectory.snapshots().size(), 1u);
}

TEST(FinetuneTest, DriftGrowsEarlyAndTrajectoryValid) {
  const auto& wm = testing::toy_watermarked();
  const auto r = finetune_drift(wm, ImageFamily::kEllipses, 40, 0.05, 2, 5);
  EXPECT_NO_THROW(TrainingTrajectory(r.trajectory.snapshots()));
  EXPECT_EQ(r.trajectory.layout(), wm.layout());
  const auto& snaps = r.trajectory.snapshots();
  ASSERT_GE(snaps.size(), 5u);
  double prev = -1;
  for (std::size_t i = 0; i < 5; ++i) {
    const double d = (snaps[i].params - wm.params()).l2_norm();
    EXPECT_GT(d, prev);
    prev = d;
  }
}

TEST(CompressionTest, PruneZeroIsIdentity) {
  const auto& wm = testing::toy_watermarked();
  EXPECT_EQ(Copy(prune(wm, 0.0).params()), Copy(wm.params()));
}

TEST(CompressionTest, PruneHalfCountsAndTies) {
  const auto& wm = testing::toy_watermarked();
  const auto p = prune(wm, 0.5).params();
  for (std::size_t l = 0; l < p.num_blocks(); ++l) {
    const auto orig = wm.params().block(l);
    const auto b = p.block(l);
    const std::size_t k = b.size() / 2;
    std::size_t zeroed = 0;
    for (std::size_t i = 0; i < b.size(); ++i) zeroed += b[i] == 0.0 && orig[i] != 0.0;
    std::size_t already = std::count(orig.begin(), orig.end(), 0.0);
    EXPECT_EQ(zeroed + std::min(already, k), k) << l;
  }
}

TEST(CompressionTest, PruneTiesGoToLowerIndex) {
  LayeredParams p = World().base.params();
  auto b = p.block(0);
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = (i % 2 ? -1.0 : 1.0) * (1.0 + (i >= 4));
  const ToyGenerator pruned = prune(World().base.with_params(p), 0.25);
  const auto out = pruned.params().block(0);
  const std::size_t k = b.size() / 4;
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(out[i] == 0.0, i < k) << i;
}

TEST(CompressionTest, QuantizeWithinHalfStep) {
  const auto& wm = testing::toy_watermarked();
  const auto p = quantize(wm, 8).params();
  for (std::size_t l = 0; l < p.num_blocks(); ++l) {
    const auto o = wm.params().block(l);
    const auto [mn, mx] = std::minmax_element(o.begin(), o.end());
    const double half = (*mx - *mn) / 255.0 / 2.0;
    for (std::size_t i = 0; i < o.size(); ++i) EXPECT_LE(std::abs(p.block(l)[i] - o[i]), half * (1 + 1e-9));
  }
  std::set<double> levels(p.block(2).begin(), p.block(2).end());
  EXPECT_LE(levels.size(), 256u);
  EXPECT_THROW(quantize(wm, 0), Error);
}

TEST(AuditTest, SharedDistributionScoresZero) {
  EXPECT_EQ(image_suspiciousness(World().base, 0, 0, 6, 1), 0.0);
}

TEST(AuditTest, CollapsedPromptScoresOne) {
  // Zero latent weights: each prompt yields one fixed image.
  GeneratorArch arch = World().base.arch();
  LayeredParams p = World().base.params();
  auto first = p.block(1);
  const std::size_t in = arch.input_dim();
  for (std::size_t o = 0; o < arch.hidden[0]; ++o)
    for (std::size_t i = 0; i < arch.latent_dim; ++i) first[o * in + i] = 0.0;
  const ToyGenerator collapsed = World().base.with_params(p);
  EXPECT_NEAR(within_prompt_distance(collapsed, 0, 5, 2), 0.0, 1e-30);
  EXPECT_THROW(image_suspiciousness(collapsed, 1, 0, 5, 2), Error);
}

TEST(AuditTest, TwoImagesIsSinglePair) {
  const auto& g = World().base;
  const double m = within_prompt_distance(g, 1, 2, 9);
  EXPECT_EQ(m, mse(g.generate(1, derive(9, {0xa0d, 0})), g.generate(1, derive(9, {0xa0d, 1}))));
}

}  // namespace
}  // namespace wmcert
