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

// Small trained models shared by several test binaries. Built once per
// process; construction is deterministic.

#ifndef WMCERT_TESTS_TOY_FIXTURE_HPP_
#define WMCERT_TESTS_TOY_FIXTURE_HPP_

#include "wmcert/embed.hpp"
#include "wmcert/synthetic.hpp"
#include "wmcert/toymodel.hpp"

namespace wmcert::testing {

struct ToyWorld {
  ToyGenerator base;
  EnergyClassifier clf;
  NoiseSpec noise;
};

inline const ToyWorld& toy_world() {
  static const ToyWorld w = [] {
    GeneratorArch arch;
    ToyGenerator g = pretrained_generator(arch, 1, 800);
    EnergyClassifier c = classifier_from_generator(g, 100, 7);
    return ToyWorld{g, c, NoiseSpec::uniform(g.layout(), 0.01)};
  }();
  return w;
}

/// The base generator after a short embedding run.
inline const ToyGenerator& toy_watermarked() {
  static const ToyGenerator g = [] {
    const auto& w = toy_world();
    EmbedConfig cfg;
    cfg.noise = w.noise;
    cfg.steps = 120;
    cfg.m_max = 4;
    return embed(w.base, w.clf, cfg, 3).generator;
  }();
  return g;
}

}  // namespace wmcert::testing

#endif  // WMCERT_TESTS_TOY_FIXTURE_HPP_
