// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/bench/generate.hpp"
#include "egnpar/models/models.hpp"

#include <vector>

namespace egnpar {

/// Small labelled data set: `count` generated systems of 3 to 5 atoms,
/// labelled with the energy and forces of a teacher model of the same
/// architecture initialized from `seed`.
inline std::vector<Sample> toy_dataset(const ModelConfig &config, std::size_t count,
                                       std::uint64_t seed) {
  ModelConfig tc = config;
  tc.seed = seed;
  tc.workers = 1;
  const ModelParams teacher = init_params(tc);
  Evaluator ev(teacher, tc);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    Sample s;
    s.system = generate_system(3 + i % 3, 0.5, seed * 7919 + i);
    const auto p = ev.predict(s.system);
    s.energy = p.energy;
    s.forces = p.forces;
    out.push_back(std::move(s));
  }
  return out;
}

} // namespace egnpar
