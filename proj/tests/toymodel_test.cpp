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

#include "toy_fixture.hpp"
#include "wmcert/toymodel.hpp"

namespace wmcert {
namespace {

// eps == 0 everywhere.
struct ZeroPredictor {
  std::size_t labels = 2;
  std::size_t num_labels() const { return labels; }
  void predict(std::span<const double>, std::size_t, double, double, std::span<double> out) const {
    for (double& v : out) v = 0.0;
  }
  void vjp(std::span<const double>, std::size_t, double, double, std::span<const double>,
           std::span<double> out) const {
    for (double& v : out) v = 0.0;
  }
};

// Recovers the injected noise exactly for a known clean image.
struct OraclePredictor {
  std::vector<double> clean;
  std::size_t num_labels() const { return 2; }
  void predict(std::span<const double> xt, std::size_t, double a, double b,
               std::span<double> out) const {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (xt[i] - a * clean[i]) / b;
  }
  void vjp(std::span<const double>, std::size_t, double, double b, std::span<const double> v,
           std::span<double> out) const {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] / b;
  }
};

Image RandomImage(std::mt19937_64& rng, std::size_t h = 16, std::size_t w = 16) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image x(h, w);
  for (double& v : x.pixels) v = u(rng);
  return x;
}

TEST(GeneratorTest, DeterministicAndInRange) {
  const auto& g = testing::toy_world().base;
  EXPECT_EQ(g.generate(0, 5), g.generate(0, 5));
  EXPECT_NE(g.generate(0, 5), g.generate(0, 6));
  EXPECT_NE(g.generate(0, 5), g.generate(1, 5));
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const Image img = g.generate(s % 2, s);
    for (double v : img.pixels) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(GeneratorTest, UnknownPromptRejected) {
  const auto& g = testing::toy_world().base;
  try {
    g.generate(2, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
  }
}

TEST(GeneratorTest, LayoutHasOneBlockPerLayer) {
  GeneratorArch arch;
  const Layout lay = arch.layout();
  EXPECT_EQ(lay.num_blocks(), 4u);
  EXPECT_EQ(lay.dim(0), 8u);
  EXPECT_EQ(lay.dim(1), 12u * 32 + 32);
  EXPECT_EQ(lay.dim(3), 64u * 256 + 256);
}

TEST(GeneratorTest, AnalyticGradientMatchesCentralDifference) {
  const auto& g = testing::toy_world().base;
  std::mt19937_64 rng(4);
  std::vector<double> weights(256);
  std::normal_distribution<double> n;
  for (double& w : weights) w = n(rng);
  auto loss = [&](std::size_t, const Image& x, Image* dx) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      s += weights[i] * x.pixels[i];
      if (dx) dx->pixels[i] = weights[i];
    }
    return s;
  };
  ImageObjective<decltype(loss)> obj({{0, 11}, {1, 12}}, loss);
  const LayeredParams grad = grad_params(obj, g);
  std::uniform_int_distribution<std::size_t> pick(0, g.layout().total_dim() - 1);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t i = pick(rng);
    const double fd = finite_difference(obj, g, i, 1e-5);
    EXPECT_NEAR(grad[i], fd, 1e-4 * std::max(std::abs(fd), 1e-3)) << "coordinate " << i;
  }
}

TEST(GeneratorTest, SmallPerturbationsMoveOutputProportionally) {
  const auto& g = testing::toy_world().base;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  for (int rep = 0; rep < 20; ++rep) {
    LayeredParams d(g.layout());
    for (double& v : d.flat()) v = n(rng);
    d *= 1e-6 / d.l2_norm();
    const Image a = g.generate(0, rep), b = g.generate_with(g.params() + d, 0, rep);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += std::pow(a.pixels[i] - b.pixels[i], 2);
    EXPECT_LE(std::sqrt(diff), 100.0 * 1e-6);
  }
}

TEST(GradParamsTest, ConstantAndQuadraticObjectives) {
  const auto& g = testing::toy_world().base;
  auto constant = [](std::size_t, const Image&, Image* dx) {
    if (dx)
      for (double& v : dx->pixels) v = 0.0;
    return 3.0;
  };
  ImageObjective<decltype(constant)> c({{0, 1}}, constant);
  EXPECT_EQ(grad_params(c, g).l2_norm(), 0.0);

  LayeredParams center = g.params();
  for (double& v : center.flat()) v += 0.25;
  QuadraticObjective q{center};
  const LayeredParams grad = grad_params(q, g);
  for (std::size_t i = 0; i < grad.size(); ++i)
    ASSERT_DOUBLE_EQ(grad[i], 2.0 * (g.params()[i] - center[i]));
}

TEST(GradParamsTest, NonFiniteObjectiveIsNumericError) {
  const auto& g = testing::toy_world().base;
  auto bad = [](std::size_t, const Image&, Image*) { return std::nan(""); };
  ImageObjective<decltype(bad)> o({{0, 1}}, bad);
  try {
    grad_params(o, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumeric);
  }
}

TEST(EnergyTest, ZeroPredictorGivesNoiseDimension) {
  ClassifierConfig cfg;
  cfg.mc_draws = 400;
  BasicEnergyClassifier<ZeroPredictor> clf(ZeroPredictor{}, cfg);
  std::mt19937_64 rng(1);
  const Image x = RandomImage(rng);
  // E||eta||^2 = 256; chi-square(256) has sd sqrt(512) per draw.
  const double e = clf.energy(x, 0, 3);
  EXPECT_NEAR(e, 256.0, 4.0 * std::sqrt(512.0 / 400.0));
}

TEST(EnergyTest, PerfectPredictorGivesZero) {
  std::mt19937_64 rng(2);
  const Image x = RandomImage(rng);
  BasicEnergyClassifier<OraclePredictor> clf(OraclePredictor{x.pixels}, {});
  EXPECT_NEAR(clf.energy(x, 1, 8), 0.0, 1e-18);
}

TEST(EnergyTest, VarianceShrinksWithDraws) {
  std::mt19937_64 rng(3);
  const Image x = RandomImage(rng);
  auto var_for = [&](std::size_t draws) {
    ClassifierConfig cfg;
    cfg.mc_draws = draws;
    BasicEnergyClassifier<ZeroPredictor> clf(ZeroPredictor{}, cfg);
    double s = 0, ss = 0;
    const int reps = 400;
    for (int r = 0; r < reps; ++r) {
      const double e = clf.energy(x, 0, r);
      s += e;
      ss += e * e;
    }
    return ss / reps - (s / reps) * (s / reps);
  };
  const double ratio = var_for(8) / var_for(32);
  EXPECT_GT(ratio, 2.8);
  EXPECT_LT(ratio, 5.5);
}

TEST(EnergyTest, NonNegativeAndGradientMatchesFiniteDifference) {
  const auto& clf = testing::toy_world().clf;
  std::mt19937_64 rng(5);
  Image x = RandomImage(rng);
  std::vector<Image> grads;
  const auto e = clf.energies(x, 77, &grads);
  for (double v : e) EXPECT_GE(v, 0.0);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t i = rng() % x.size();
    const double orig = x.pixels[i];
    x.pixels[i] = orig + 1e-6;
    const auto ep = clf.energies(x, 77);
    x.pixels[i] = orig - 1e-6;
    const auto em = clf.energies(x, 77);
    x.pixels[i] = orig;
    for (std::size_t y = 0; y < 2; ++y) {
      const double fd = (ep[y] - em[y]) / 2e-6;
      EXPECT_NEAR(grads[y].pixels[i], fd, 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(PosteriorTest, SoftmaxIdentities) {
  using C = EnergyClassifier;
  auto u = C::gibbs_posterior(std::vector<double>{2.0, 2.0});
  EXPECT_DOUBLE_EQ(u[0], 0.5);
  auto p = C::gibbs_posterior(std::vector<double>{0.0, std::log(3.0)});
  EXPECT_NEAR(p[0], 0.75, 1e-15);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
  auto q = C::gibbs_posterior(std::vector<double>{5.0, 5.0 + std::log(3.0)});
  EXPECT_NEAR(q[0], p[0], 1e-15);
  EXPECT_NEAR(q[1], p[1], 1e-15);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> e(0.0, 500.0);
  for (int r = 0; r < 1000; ++r) {
    auto v = C::gibbs_posterior(std::vector<double>{e(rng), e(rng), e(rng)});
    EXPECT_NEAR(v[0] + v[1] + v[2], 1.0, 1e-12);
  }
}

TEST(PosteriorTest, DeterministicGivenSeed) {
  const auto& w = testing::toy_world();
  const Image x = w.base.generate(0, 4);
  EXPECT_EQ(w.clf.posterior(x, 10), w.clf.posterior(x, 10));
}

TEST(PredictTest, ArgmaxTieBreakAndMinEnergyAgreement) {
  EXPECT_EQ(EnergyClassifier::argmax_label(std::vector<double>{0.9, 0.1}), 0u);
  EXPECT_EQ(EnergyClassifier::argmax_label(std::vector<double>{0.5, 0.5}), 0u);
  const auto& clf = testing::toy_world().clf;
  std::mt19937_64 rng(7);
  for (int r = 0; r < 1000; ++r) {
    const Image x = RandomImage(rng);
    const auto e = clf.energies(x, r);
    const Label min_e = e[1] < e[0] ? 1 : 0;
    EXPECT_EQ(clf.predict(x, r), min_e);
  }
}

TEST(ClassifierTest, SeparatesTheTwoPrompts) {
  const auto& w = testing::toy_world();
  int correct = 0;
  for (std::uint64_t s = 0; s < 200; ++s) correct += w.clf.predict(w.base.generate(s % 2, s), s) == s % 2;
  EXPECT_GT(correct, 140);
}

}  // namespace
}  // namespace wmcert
