// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/bench/generate.hpp"
#include "egnpar/gradients/gradients.hpp"
#include "egnpar/models/models.hpp"
#include "egnpar/partition/partition.hpp"
#include "egnpar/runtime/parallel.hpp"

#include "json.hpp"

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace egnpar {

struct VerifyOptions {
  ModelConfig config;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<std::size_t> workers = {1, 2, 3, 4};
  std::size_t atoms = 12;
  /// Injected into every parallel run; used to prove the suite can fail.
  ReductionFault fault = ReductionFault::none;
  double equivalence_tol = 1e-9;
  double fd_tol = 1e-5;
  double fd_step = 1e-5;
  double invariance_tol = 1e-9;
};

struct CheckResult {
  std::string name;
  bool passed = true;
  double worst = 0.0; // largest error seen, where meaningful
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool passed() const {
    for (const auto &c : checks)
      if (!c.passed)
        return false;
    return true;
  }
  std::vector<std::string> failed() const {
    std::vector<std::string> out;
    for (const auto &c : checks)
      if (!c.passed)
        out.push_back(c.name);
    return out;
  }
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["passed"] = passed();
    j["failed"] = failed();
    j["checks"] = nlohmann::json::array();
    for (const auto &c : checks)
      j["checks"].push_back(
          {{"name", c.name}, {"passed", c.passed}, {"worst", c.worst}, {"detail", c.detail}});
    return j;
  }
};

inline CheckResult named_check(std::string name) {
  CheckResult c;
  c.name = std::move(name);
  return c;
}

namespace detail {

inline void note(CheckResult &c, double err, double tol, const std::string &where) {
  c.worst = std::max(c.worst, std::isnan(err) ? INFINITY : err);
  if (!(err <= tol)) {
    c.passed = false;
    if (c.detail.empty()) {
      std::ostringstream os;
      os << where << ": error " << err << " > " << tol;
      c.detail = os.str();
    }
  }
}

inline void fail(CheckResult &c, const std::string &where, const std::exception &e) {
  c.passed = false;
  c.worst = INFINITY;
  if (c.detail.empty())
    c.detail = where + ": " + e.what();
}

/// True if the neighbor list is the same after moving one coordinate by +-h
/// and no angle is within a small margin of 0 or pi.
inline bool fd_safe(const AtomicSystem &s, double cutoff, double h) {
  const auto g = build_graph(s, cutoff);
  for (double d : g.geometry.distances)
    if (std::abs(d - cutoff) < 10 * h)
      return false;
  for (double a : g.geometry.angles)
    if (std::sin(a) < 1e-3)
      return false;
  return true;
}

inline Matrix rotate_rows(const Matrix &m, const Mat3 &r) {
  Matrix out(m.rows(), 3);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const Vec3 v = r * Vec3{m(i, 0), m(i, 1), m(i, 2)};
    for (int c = 0; c < 3; ++c)
      out(i, c) = v[c];
  }
  return out;
}

} // namespace detail

/// Runs every check for every seed and worker count. Checks:
///   parallel-vs-sequential  energy, forces, parameter and position gradients
///   comm-accounting         forward all-reduce volume per block
///   triplets-not-communicated
///   finite-difference-forces  dE/dx against central differences
///   rigid-motion-invariance
///   tape-replay
inline VerifyReport run_verify(const VerifyOptions &o) {
  o.config.validate();
  CheckResult equiv = named_check("parallel-vs-sequential");
  CheckResult comm = named_check("comm-accounting");
  CheckResult trip = named_check("triplets-not-communicated");
  CheckResult fd = named_check("finite-difference-forces");
  CheckResult inv = named_check("rigid-motion-invariance");
  CheckResult replay = named_check("tape-replay");

  for (std::uint64_t seed : o.seeds) {
    ModelConfig cfg = o.config;
    cfg.seed = seed;
    cfg.workers = 1;
    const ModelParams params = init_params(cfg);
    const AtomicSystem sys = generate_system(o.atoms, 0.5, seed);
    const auto topo = Evaluator::topology_of(sys, cfg.cutoff);
    const Matrix pos = sys.position_matrix();
    const std::string at = "seed " + std::to_string(seed);

    // Sequential reference.
    SequentialEngine seq(params, cfg, topo, sys.atomic_numbers, pos, {true, true});
    auto ref = backward(seq.program(), 1.0);
    const double e_ref = seq.program().energy();

    try {
      seq.program().tape().verify_replay();
    } catch (const std::exception &e) {
      detail::fail(replay, at, e);
    }

    const auto vol = comm_volume(comm_model_for(*topo, cfg), cfg.blocks);
    for (std::size_t p : o.workers) {
      const std::string where = at + ", P=" + std::to_string(p);
      try {
        WorkerGroup group(p, {std::chrono::seconds(30), o.fault});
        ParallelEngine eng(group, params, cfg, topo, sys.atomic_numbers, pos, {true, true});
        const auto &f = eng.forward();
        auto g = eng.backward(1.0);
        Matrix ea(1, 1, f.energy), eb(1, 1, e_ref);
        double err = max_rel_error(ea, eb);
        err = std::max(err, max_rel_error(g.d_positions, ref.d_positions));
        if (f.direct_forces)
          err = std::max(err, max_rel_error(*f.direct_forces, seq.program().direct_forces()));
        std::vector<const Matrix *> a, b;
        g.d_params.for_each([&](const std::string &, const Matrix &m, std::size_t) {
          a.push_back(&m);
        });
        ref.d_params.for_each([&](const std::string &, const Matrix &m, std::size_t) {
          b.push_back(&m);
        });
        for (std::size_t i = 0; i < a.size(); ++i)
          err = std::max(err, max_rel_error(*a[i], *b[i]));
        detail::note(equiv, err, o.equivalence_tol, where);

        const auto &ctr = f.counters;
        detail::note(trip,
                     static_cast<double>(ctr.elements(Phase::forward, Level::triplet) +
                                         eng.backward_counters().elements(Phase::backward, Level::triplet)),
                     0.0, where);
        double comm_err = 0.0;
        for (std::uint32_t b = 0; b < cfg.blocks; ++b) {
          const auto got = ctr.elements(Phase::forward, static_cast<int>(b));
          comm_err = std::max(comm_err, std::abs(static_cast<double>(got) -
                                                 static_cast<double>(vol.per_block)));
        }
        comm_err = std::max(comm_err, std::abs(static_cast<double>(ctr.elements(Phase::forward)) -
                                               static_cast<double>(vol.total)));
        detail::note(comm, comm_err, 0.0, where);
      } catch (const std::exception &e) {
        detail::fail(equiv, where, e);
      }
    }

    // Finite differences on a small system away from cutoff and collinear angles.
    try {
      AtomicSystem small;
      for (std::uint64_t k = 0;; ++k) {
        small = generate_system(6, 0.5, seed * 1000 + k);
        if (detail::fd_safe(small, cfg.cutoff, o.fd_step))
          break;
        if (k > 100)
          throw Error("no finite-difference-safe system found");
      }
      const auto stopo = Evaluator::topology_of(small, cfg.cutoff);
      const auto eg = energy_and_position_gradient(small, params, cfg, stopo);
      Matrix num(small.size(), 3);
      for (std::size_t i = 0; i < small.size(); ++i)
        for (int c = 0; c < 3; ++c) {
          AtomicSystem sp = small, sm = small;
          sp.positions[i][c] += o.fd_step;
          sm.positions[i][c] -= o.fd_step;
          const double ep = energy_and_position_gradient(sp, params, cfg, stopo).energy;
          const double em = energy_and_position_gradient(sm, params, cfg, stopo).energy;
          num(i, c) = (ep - em) / (2 * o.fd_step);
        }
      detail::note(fd, max_rel_error(eg.d_positions, num, 1e-8), o.fd_tol, at);
    } catch (const std::exception &e) {
      detail::fail(fd, at, e);
    }

    // Random rotation + translation.
    try {
      SplitMix64 rng(seed ^ 0xA5A5A5A5ULL);
      const Mat3 rot = rotation_from_quaternion(rng.normal(), rng.normal(), rng.normal(),
                                                rng.normal());
      const Vec3 shift{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
      AtomicSystem moved = sys;
      for (auto &x : moved.positions)
        x = rot * x + shift;
      const auto p0 = predict(sys, params, cfg);
      const auto p1 = predict(moved, params, cfg);
      double err = std::abs(p1.energy - p0.energy) / std::max(std::abs(p0.energy), 1e-300);
      err = std::max(err, max_rel_error(p1.forces, detail::rotate_rows(p0.forces, rot)));
      detail::note(inv, err, o.invariance_tol, at);
    } catch (const std::exception &e) {
      detail::fail(inv, at, e);
    }
  }
  return {{equiv, comm, trip, fd, inv, replay}};
}

} // namespace egnpar
