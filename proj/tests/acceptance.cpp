// SPDX-License-Identifier: Apache-2.0
// Acceptance checks. One line per criterion; exit status is the number of
// failed criteria.
#include "egnpar/bench/fixtures.hpp"
#include "egnpar/bench/generate.hpp"
#include "egnpar/bench/weak_scaling.hpp"
#include "egnpar/gradients/gradients.hpp"
#include "egnpar/models/models.hpp"

#include "equivalence.hpp"
#include "fd.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

using namespace egnpar;
using namespace testing_support;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

Outcome check(bool ok, std::string detail) { return {ok, std::move(detail)}; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

const Matrix *seed_if_direct(const ModelConfig &c, const Matrix &m) {
  return energy_centric(c.variant) ? nullptr : &m;
}

AtomicSystem dimer(double d) {
  AtomicSystem s;
  s.positions = {{0, 0, 0}, {d, 0, 0}};
  s.atomic_numbers = {6, 6};
  return s;
}

// 1 -------------------------------------------------------------------------

Outcome equivalence() {
  double worst = 0.0;
  std::string where;
  std::size_t runs = 0;
  for (Variant v : {Variant::dimenet, Variant::gemnet}) {
    std::map<std::size_t, WorkerGroup> groups;
    for (std::size_t p : {1, 2, 3, 4, 8})
      groups.try_emplace(p, p);
    for (std::uint64_t k = 0; k < 20; ++k) {
      const auto c = small_config(v, k);
      const auto params = init_params(c);
      const std::size_t n = 6 + (k * 17) % 55;
      const auto s = generate_system(n, 0.5, 100 + k);
      const auto topo = topology_of(s, c.cutoff);
      const auto fs = force_seed_for(n, k);
      const auto seq = run_sequential(params, c, topo, s, seed_if_direct(c, fs));
      for (auto &[p, g] : groups) {
        const auto d = compare(run_parallel(g, params, c, topo, s, seed_if_direct(c, fs)), seq);
        ++runs;
        if (d.worst > worst || where.empty()) {
          worst = d.worst;
          where = std::string(to_string(v)) + " n=" + std::to_string(n) + " P=" +
                  std::to_string(p) + " " + d.where;
        }
      }
    }
  }
  return check(worst <= 1e-9, std::to_string(runs) + " runs, worst relative " + fmt(worst) +
                                  " (" + where + ")");
}

// 2 -------------------------------------------------------------------------

/// Per-block forward volume counted by hand: one or two aggregated edge
/// buffers, the node buffer and the pooled global vector.
std::uint64_t hand_count(const GraphTopology &t, const ModelConfig &c) {
  const std::uint64_t edge_buffers = c.variant == Variant::gemnet ? 2 : 1;
  return edge_buffers * t.num_edges() * c.d_e + t.num_nodes * c.d_v + c.d_u;
}

struct Measured {
  std::vector<std::uint64_t> per_block;
  std::uint64_t triplet_elements = 0;
};

Measured measure(const AtomicSystem &s, const ModelConfig &c, std::size_t workers) {
  const auto params = init_params(c);
  const auto topo = topology_of(s, c.cutoff);
  WorkerGroup g(workers);
  const auto fs = force_seed_for(s.size(), 3);
  const auto out = run_parallel(g, params, c, topo, s, seed_if_direct(c, fs));
  Measured m;
  for (std::uint32_t b = 0; b < c.blocks; ++b)
    m.per_block.push_back(out.forward.elements(Phase::forward, static_cast<int>(b)));
  for (const auto *counters : {&out.forward, &out.backward})
    for (const auto &e : counters->events)
      if (e.tag.level == Level::triplet)
        m.triplet_elements += e.elements();
  return m;
}

AtomicSystem path4() {
  AtomicSystem s;
  s.positions = {{0, 0, 0}, {1, 0, 0}, {1.7, 0.7, 0}, {2.7, 0.7, 0}};
  s.atomic_numbers = {6, 6, 6, 6};
  return s;
}

AtomicSystem star4() {
  AtomicSystem s = ring(3, 1.0);
  s.positions.push_back({0, 0, 0.05});
  s.atomic_numbers.push_back(6);
  return s;
}

Outcome communication() {
  std::size_t checks = 0, bad = 0;
  std::uint64_t triplets_seen = 0;
  for (Variant v : {Variant::dimenet, Variant::gemnet}) {
    for (std::uint64_t k = 0; k < 4; ++k) {
      auto c = small_config(v, k);
      const auto s = generate_system(12 + 8 * k, 0.5, 40 + k);
      const auto topo = build_graph(s, c.cutoff).topology;
      const auto want = hand_count(topo, c);
      for (std::size_t p : {1, 2, 4}) {
        auto m = measure(s, c, p);
        triplets_seen += m.triplet_elements;
        for (auto e : m.per_block) {
          ++checks;
          bad += e != want;
        }
        auto wide = c;
        wide.d_t *= 2;
        m = measure(s, wide, p);
        triplets_seen += m.triplet_elements;
        for (auto e : m.per_block) {
          ++checks;
          bad += e != want;
        }
      }
    }
    // same N_v and N_e, different N_t
    const auto c = small_config(v, 9);
    const auto a = build_graph(path4(), c.cutoff).topology;
    const auto b = build_graph(star4(), c.cutoff).topology;
    ++checks;
    if (a.num_edges() != 6 || b.num_edges() != 6 || a.num_triplets() != 4 ||
        b.num_triplets() != 6) {
      ++bad;
    } else {
      const auto ma = measure(path4(), c, 2), mb = measure(star4(), c, 2);
      bad += ma.per_block != mb.per_block || ma.per_block.front() != hand_count(a, c);
      triplets_seen += ma.triplet_elements + mb.triplet_elements;
    }
  }
  return check(bad == 0 && triplets_seen == 0,
               std::to_string(checks) + " block volumes checked, " + std::to_string(bad) +
                   " mismatched, " + std::to_string(triplets_seen) +
                   " triplet elements communicated");
}

// 3 -------------------------------------------------------------------------

Outcome force_fidelity() {
  const auto c = small_config(Variant::dimenet, 9);
  const auto p = init_params(c);
  double worst = 0.0, worst_element = 0.0, net_worst = 0.0, torque_worst = 0.0;
  int tested = 0;
  for (std::uint64_t seed = 0; tested < 10; ++seed) {
    const auto s = random_cloud(6, 1.5, 500 + seed, 0.6);
    if (!fd_safe(s, c.cutoff, 1e-5) || build_graph(s, c.cutoff).topology.num_triplets() == 0)
      continue;
    ++tested;
    const auto f = forces_energy_centric(s, p, c);
    Matrix fd(s.size(), 3);
    for (std::size_t i = 0; i < s.size(); ++i)
      for (int d = 0; d < 3; ++d)
        fd(i, d) = -static_cast<double>(central_ld(
            [&](long double h) {
              auto x = oracle::widen<long double>(as_p3(s));
              x[i][d] += h;
              return oracle::naive_forward(x, s.atomic_numbers, p, c).energy;
            },
            1e-5L));
    worst = std::max(worst, max_abs_diff(f, fd) / std::max(max_abs(fd), 1e-8));
    for (std::size_t i = 0; i < f.size(); ++i)
      worst_element =
          std::max(worst_element, std::abs(f[i] - fd[i]) / std::max(std::abs(fd[i]), 1e-8));
    Vec3 net{0, 0, 0}, torque{0, 0, 0};
    for (std::size_t i = 0; i < s.size(); ++i) {
      const Vec3 fi{f(i, 0), f(i, 1), f(i, 2)};
      net = net + fi;
      torque = torque + cross(s.positions[i], fi);
    }
    net_worst = std::max(net_worst, norm(net));
    torque_worst = std::max(torque_worst, norm(torque));
  }
  return check(worst <= 1e-5 && worst_element <= 1e-5 && net_worst < 1e-8 &&
                   torque_worst < 1e-8,
               "10 systems, relative " + fmt(worst) + " per system (element-wise " +
                   fmt(worst_element) + "), |net force| " + fmt(net_worst) + ", |torque| " +
                   fmt(torque_worst));
}

// 4 -------------------------------------------------------------------------

Outcome invariances() {
  double rigid = 0.0, perm_err = 0.0;
  for (Variant v : {Variant::dimenet, Variant::gemnet}) {
    const auto c = small_config(v, 4);
    const auto p = init_params(c);
    const auto s = generate_system(16, 0.5, 77);
    const auto base = predict(s, p, c);
    SplitMix64 rng(1234);
    for (int trial = 0; trial < 20; ++trial) {
      const Mat3 r = random_rotation(rng);
      const Vec3 shift{rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10)};
      auto moved = s;
      for (auto &x : moved.positions)
        x = r * x + shift;
      const auto m = predict(moved, p, c);
      rigid = std::max({rigid, rel(m.energy, base.energy),
                        max_rel_error(m.forces, rotate_rows(base.forces, r))});
    }
    // shuffle atoms within each species
    std::map<int, std::vector<std::size_t>> by_species;
    for (std::size_t i = 0; i < s.size(); ++i)
      by_species[s.atomic_numbers[i]].push_back(i);
    std::vector<std::size_t> perm(s.size());
    for (auto &[z, idx] : by_species) {
      auto shuffled = idx;
      for (std::size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
      for (std::size_t k = 0; k < idx.size(); ++k)
        perm[idx[k]] = shuffled[k];
    }
    AtomicSystem q = s;
    for (std::size_t k = 0; k < s.size(); ++k)
      q.positions[k] = s.positions[perm[k]];
    const auto pq = predict(q, p, c);
    Matrix expect(s.size(), 3);
    for (std::size_t k = 0; k < s.size(); ++k)
      for (int d = 0; d < 3; ++d)
        expect(k, d) = base.forces(perm[k], d);
    perm_err = std::max({perm_err, rel(pq.energy, base.energy), max_rel_error(pq.forces, expect)});
  }
  return check(rigid <= 1e-9 && perm_err <= 1e-9,
               "20 rigid motions per variant, worst " + fmt(rigid) + "; permutation " +
                   fmt(perm_err));
}

// 5 -------------------------------------------------------------------------

Outcome topology() {
  std::size_t mismatched = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t n = 1 + seed % 20;
    const auto s = random_cloud(n, 2.2, 900 + seed);
    const auto g = build_graph(s, 1.5);
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> got;
    for (const auto &t : g.topology.triplets) {
      const auto &in = g.topology.edges[t.in_edge];
      const auto &out = g.topology.edges[t.out_edge];
      got.insert({in.source, in.receiver, out.receiver});
    }
    const auto want = oracle::brute_force_triplets(as_p3(s), 1.5);
    total += want.size();
    mismatched += got.size() != g.topology.num_triplets() || got != want;
  }
  return check(mismatched == 0, "50 systems, " + std::to_string(total) + " triplets, " +
                                    std::to_string(mismatched) + " mismatched");
}

// 6 -------------------------------------------------------------------------

Outcome relaxation() {
  const auto [c, p] = quadratic_fixture(1.5, 3.0);
  RelaxOptions o;
  o.fmax = 1e-3;
  const auto r = relax(dimer(2.0), p, c, o);
  const auto &x = r.trajectory.back();
  const double d = norm(x[1] - x[0]);
  bool monotone = true;
  for (std::size_t k = 1; k < r.energies.size(); ++k)
    monotone = monotone && r.energies[k] <= r.energies[k - 1];
  bool capped = true;
  for (std::size_t cap : {1, 2, 5}) {
    RelaxOptions t = o;
    t.fmax = 1e-12;
    t.max_steps = cap;
    const auto rc = relax(dimer(2.0), p, c, t);
    capped = capped && rc.steps == cap && rc.trajectory.size() == cap + 1 && !rc.converged;
  }
  return check(r.converged && r.steps <= 200 && std::abs(d - 1.5) <= 1e-3 && monotone && capped,
               "d=" + fmt(d) + " after " + std::to_string(r.steps) + " steps, monotone " +
                   (monotone ? "yes" : "no") + ", step cap " + (capped ? "exact" : "violated"));
}

// 7 -------------------------------------------------------------------------

Outcome training() {
  const ModelConfig c;
  const auto data = toy_dataset(c, 5, 1);
  TrainOptions o;
  o.lr = 0.05;
  o.steps = 500;
  const auto r = train_simple(data, init_params(c), c, o);
  const double ratio = r.loss_history.front() / r.loss_history.back();
  const double fd = loss_fd_error(data, init_params(c), c, TrainOptions{}, 1e-5);
  return check(ratio >= 10 && fd <= 1e-5, "loss " + fmt(r.loss_history.front()) + " -> " +
                                              fmt(r.loss_history.back()) + " (" + fmt(ratio) +
                                              "x) in 500 steps, gradient FD " + fmt(fd));
}

// 8 -------------------------------------------------------------------------

std::string stable_columns(const BenchReport &rep) {
  std::ostringstream os;
  write_bench_csv(os, rep);
  std::istringstream in(os.str());
  std::string line, out;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');)
      cells.push_back(cell);
    // drop median_ms, throughput and efficiency
    out += cells.at(0) + "," + cells.at(1) + "," + cells.at(2) + "," + cells.at(5) + "\n";
  }
  return out;
}

BenchOptions small_bench() {
  auto o = default_bench_options();
  o.workers = {1, 2, 4};
  o.atoms = 16;
  o.warmup = 0;
  o.iterations = 1;
  return o;
}

Outcome determinism() {
  bool same = true;
  for (Variant v : {Variant::dimenet, Variant::gemnet}) {
    const auto c = small_config(v, 21);
    const auto params = init_params(c);
    const auto s = generate_system(40, 0.5, 21);
    const auto fs = force_seed_for(s.size(), 21);
    for (std::size_t p : {1, 3, 8}) {
      WorkerGroup g1(p), g2(p);
      same = same && bit_equal(run_parallel(g1, params, c, topology_of(s, c.cutoff), s,
                                            seed_if_direct(c, fs)),
                               run_parallel(g2, params, c, topology_of(s, c.cutoff), s,
                                            seed_if_direct(c, fs)));
    }
  }
  const bool csv = stable_columns(run_weak_scaling(small_bench())) ==
                   stable_columns(run_weak_scaling(small_bench()));
  return check(same && csv, std::string("energies and gradients ") +
                                (same ? "bit-identical" : "differ") + ", CSV " +
                                (csv ? "identical" : "differs"));
}

// 9 -------------------------------------------------------------------------

Outcome weak_scaling() {
  auto o = default_bench_options();
  o.warmup = 0;
  o.iterations = 2;
  const auto rep = run_weak_scaling(o);
  std::ostringstream os;
  write_bench_csv(os, rep);
  std::istringstream in(os.str());
  std::string header;
  std::getline(in, header);
  std::istringstream again(os.str());
  const auto rows = parse_bench_csv(again);

  const auto sys = generate_system(o.atoms, 0.5, o.system_seed);
  const auto topo = build_graph(sys, o.base.cutoff).topology;
  bool ok = header == kBenchCsvHeader && rows.size() == 4 && rows[0].efficiency == 1.0;
  std::string cells;
  for (std::size_t i = 0; ok && i < rows.size(); ++i) {
    const auto c = scaled_config(o.base, o.workers[i]);
    const std::uint64_t want = c.blocks * hand_count(topo, c);
    ok = rows[i].workers == o.workers[i] && rows[i].allreduced_elements == want &&
         rows[i].params == init_params(c).count() && rows[i].median_ms > 0;
    cells += " P=" + std::to_string(rows[i].workers) + ":" +
             std::to_string(rows[i].allreduced_elements);
  }
  return check(ok, std::to_string(rows.size()) + " rows, efficiency(1)=" +
                       (rows.empty() ? std::string("-") : fmt(rows[0].efficiency)) +
                       ", all-reduced elements" + cells);
}

} // namespace

int main() {
  const std::vector<std::pair<const char *, Outcome (*)()>> criteria = {
      {"parallel and sequential engines agree", equivalence},
      {"triplet buffers never communicated, volume exact", communication},
      {"forces match finite differences", force_fidelity},
      {"rigid-motion and permutation invariance", invariances},
      {"triplet enumeration matches brute force", topology},
      {"quadratic dimer relaxation", relaxation},
      {"training smoke", training},
      {"bitwise determinism", determinism},
      {"weak-scaling CSV", weak_scaling},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": "
              << o.detail << " (" << fmt(s) << " s)" << std::endl;
  }
  return failed;
}
