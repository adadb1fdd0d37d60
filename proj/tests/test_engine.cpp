// SPDX-License-Identifier: Apache-2.0
#include "egnpar/model/engine.hpp"

#include "oracles.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace egnpar;
using namespace testing_support;

namespace {

/// max |a - b| / max(1, max |b|)
double scaled_error(const Matrix &a, const Matrix &b) {
  EXPECT_TRUE(a.same_shape(b)) << a.shape_string() << " vs " << b.shape_string();
  if (!a.same_shape(b))
    return 1e300;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst / std::max(1.0, max_abs(b));
}

Matrix p3_matrix(const std::vector<oracle::P3> &v) {
  Matrix m(v.size(), 3);
  for (std::size_t i = 0; i < v.size(); ++i)
    for (int c = 0; c < 3; ++c)
      m(i, c) = v[i][c];
  return m;
}

struct Run {
  double energy;
  FeatureState state;
  Matrix forces;
};

Run run(const AtomicSystem &s, const ModelParams &p, const ModelConfig &c) {
  SequentialEngine eng(p, c, topology_of(s, c.cutoff), s.atomic_numbers, s.position_matrix());
  const auto &prog = eng.program();
  return {prog.energy(), prog.state(),
          prog.has_direct_forces() ? prog.direct_forces() : Matrix()};
}

Matrix random_matrix(std::size_t r, std::size_t c, SplitMix64 &rng) {
  Matrix m(r, c);
  for (auto &v : m.flat())
    v = rng.uniform(-1, 1);
  return m;
}

class BothVariants : public ::testing::TestWithParam<Variant> {};

} // namespace

TEST_P(BothVariants, MatchesNaiveOracle) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const auto c = small_config(GetParam(), seed);
    const auto p = init_params(c);
    const auto s = random_cloud(2 + seed, 1.7, 100 + seed);
    const auto got = run(s, p, c);
    const auto want = oracle::naive_forward(as_p3(s), s.atomic_numbers, p, c);
    EXPECT_LE(rel(got.energy, want.energy, 1.0), 1e-12) << "seed " << seed;
    EXPECT_LE(scaled_error(got.state.node, oracle::to_matrix(want.state.node, c.d_v)), 1e-12);
    EXPECT_LE(scaled_error(got.state.edge, oracle::to_matrix(want.state.edge, c.d_e)), 1e-12);
    EXPECT_LE(scaled_error(got.state.triplet, oracle::to_matrix(want.state.trip, c.d_t)),
              1e-12);
    EXPECT_LE(scaled_error(got.state.global, oracle::to_matrix({want.state.global}, c.d_u)),
              1e-12);
    if (GetParam() == Variant::gemnet) {
      EXPECT_LE(scaled_error(got.forces, p3_matrix(want.direct_forces)), 1e-12);
    }
  }
}

TEST_P(BothVariants, BlockForwardMatchesNaiveBlock) {
  const auto c = small_config(GetParam(), 4);
  const auto p = init_params(c);
  const auto s = random_cloud(7, 1.6, 9);
  const auto g = build_graph(s, c.cutoff);
  const auto basis = compute_basis(g.topology, g.geometry, c.radial_basis(), c.l_sbf);
  SplitMix64 rng(3);
  FeatureState st{random_matrix(1, c.d_u, rng), random_matrix(s.size(), c.d_v, rng),
                  random_matrix(g.topology.num_edges(), c.d_e, rng),
                  random_matrix(g.topology.num_triplets(), c.d_t, rng)};
  const auto got = egn_block_forward(st, g.topology, basis, p.blocks[1], c.variant);

  auto rows = [](const Matrix &m) {
    std::vector<oracle::Vec> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
      out[i].assign(m.row(i).begin(), m.row(i).end());
    return out;
  };
  oracle::State ost{rows(st.global)[0], rows(st.node), rows(st.edge), rows(st.triplet)};
  const auto in = oracle::make_inputs(as_p3(s), c);
  const auto want = oracle::naive_block(ost, in, p.blocks[1], c.variant, s.size());
  EXPECT_LE(scaled_error(got.node, oracle::to_matrix(want.node, c.d_v)), 1e-12);
  EXPECT_LE(scaled_error(got.edge, oracle::to_matrix(want.edge, c.d_e)), 1e-12);
  EXPECT_LE(scaled_error(got.triplet, oracle::to_matrix(want.trip, c.d_t)), 1e-12);
  EXPECT_LE(scaled_error(got.global, oracle::to_matrix({want.global}, c.d_u)), 1e-12);
}

TEST_P(BothVariants, InitFeatures) {
  const auto c = small_config(GetParam(), 2);
  const auto p = init_params(c);
  const auto s = random_cloud(6, 1.6, 2);
  const auto g = build_graph(s, c.cutoff);
  const auto basis = compute_basis(g.topology, g.geometry, c.radial_basis(), c.l_sbf);
  const auto st = init_features(g.topology, basis, s.atomic_numbers, p);
  const auto want = oracle::naive_init(oracle::make_inputs(as_p3(s), c), s.atomic_numbers, p);
  EXPECT_LE(scaled_error(st.node, oracle::to_matrix(want.node, c.d_v)), 1e-15);
  EXPECT_LE(scaled_error(st.edge, oracle::to_matrix(want.edge, c.d_e)), 1e-14);
  EXPECT_EQ(max_abs(st.global), 0.0);
  EXPECT_EQ(st.triplet.rows(), g.topology.num_triplets());
  EXPECT_EQ(max_abs(st.triplet), 0.0);
}

TEST_P(BothVariants, GraphWithoutEdges) {
  const auto c = small_config(GetParam(), 1);
  const auto p = init_params(c);
  AtomicSystem s;
  s.positions = {{0, 0, 0}, {5, 0, 0}, {0, 5, 0}};
  s.atomic_numbers = {1, 6, 8};
  const auto got = run(s, p, c);
  EXPECT_EQ(got.state.edge.rows(), 0u);
  EXPECT_EQ(got.state.triplet.rows(), 0u);
  EXPECT_TRUE(std::isfinite(got.energy));
  const auto want = oracle::naive_forward(as_p3(s), s.atomic_numbers, p, c);
  EXPECT_LE(rel(got.energy, want.energy, 1.0), 1e-12);
  if (GetParam() == Variant::gemnet) {
    EXPECT_EQ(max_abs(got.forces), 0.0);
  }
}

TEST_P(BothVariants, ZeroWeightBlockIsIdentity) {
  const auto c = small_config(GetParam());
  const auto p = make_zero_params(c.shape());
  const auto s = random_cloud(5, 1.5, 5);
  const auto g = build_graph(s, c.cutoff);
  const auto basis = compute_basis(g.topology, g.geometry, c.radial_basis(), c.l_sbf);
  SplitMix64 rng(8);
  FeatureState st{random_matrix(1, c.d_u, rng), random_matrix(s.size(), c.d_v, rng),
                  random_matrix(g.topology.num_edges(), c.d_e, rng),
                  random_matrix(g.topology.num_triplets(), c.d_t, rng)};
  const auto out = egn_block_forward(st, g.topology, basis, p.blocks[0], c.variant);
  EXPECT_TRUE(out.node.bit_equal(st.node));
  EXPECT_TRUE(out.edge.bit_equal(st.edge));
  EXPECT_TRUE(out.global.bit_equal(st.global));
}

TEST_P(BothVariants, ReadoutIsAffineInGlobalState) {
  const auto c = small_config(GetParam());
  auto p = make_zero_params(c.shape());
  p.energy_head.bias[0] = 0.7;
  const auto s = random_cloud(4, 1.4, 1);
  EXPECT_EQ(run(s, p, c).energy, 0.7);
  FeatureState st;
  st.global = Matrix{{1.0, -2.0, 0.5}};
  p.energy_head.weight = Matrix{{2.0}, {1.0}, {4.0}};
  EXPECT_DOUBLE_EQ(energy_readout(st, p), 0.7 + 2.0 - 2.0 + 2.0);
}

TEST_P(BothVariants, RepeatedRunsAreBitwiseEqual) {
  const auto c = small_config(GetParam(), 6);
  const auto p = init_params(c);
  const auto s = random_cloud(10, 1.8, 6);
  const auto a = run(s, p, c), b = run(s, p, c);
  EXPECT_EQ(std::bit_cast<std::uint64_t>(a.energy), std::bit_cast<std::uint64_t>(b.energy));
  EXPECT_TRUE(a.state.edge.bit_equal(b.state.edge));
  EXPECT_TRUE(a.forces.bit_equal(b.forces));
}

TEST_P(BothVariants, InvariantUnderRigidMotionAndPermutation) {
  const auto c = small_config(GetParam(), 7);
  const auto p = init_params(c);
  SplitMix64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const auto s = random_cloud(8, 1.7, 200 + trial);
    const auto base = run(s, p, c);
    const Mat3 r = random_rotation(rng);
    const Vec3 shift{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    auto moved = s;
    for (auto &x : moved.positions)
      x = r * x + shift;
    const auto m = run(moved, p, c);
    EXPECT_LE(rel(m.energy, base.energy, 1.0), 1e-10);
    if (GetParam() == Variant::gemnet) {
      EXPECT_LE(scaled_error(m.forces, rotate_rows(base.forces, r)), 1e-10);
    }

    std::vector<std::size_t> perm(s.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i)
      std::swap(perm[i], perm[rng.below(i + 1)]);
    AtomicSystem q;
    for (auto i : perm) {
      q.positions.push_back(s.positions[i]);
      q.atomic_numbers.push_back(s.atomic_numbers[i]);
    }
    const auto pq = run(q, p, c);
    EXPECT_LE(rel(pq.energy, base.energy, 1.0), 1e-10);
    if (GetParam() == Variant::gemnet) {
      for (std::size_t k = 0; k < perm.size(); ++k)
        for (int d = 0; d < 3; ++d)
          EXPECT_NEAR(pq.forces(k, d), base.forces(perm[k], d), 1e-10);
    }
  }
}

TEST_P(BothVariants, RejectsBadInput) {
  const auto c = small_config(GetParam());
  const auto p = init_params(c);
  auto s = random_cloud(3, 1.2, 1);
  s.atomic_numbers[1] = 0;
  EXPECT_THROW(run(s, p, c), Error);
  s.atomic_numbers[1] = 119;
  EXPECT_THROW(run(s, p, c), Error);
  s.atomic_numbers[1] = 118;
  EXPECT_NO_THROW(run(s, p, c));
  auto other = c;
  other.d_e += 1;
  EXPECT_THROW(run(s, p, other), ShapeError);
}

INSTANTIATE_TEST_SUITE_P(Engine, BothVariants, ::testing::Values(Variant::dimenet, Variant::gemnet),
                         [](const auto &info) { return std::string(to_string(info.param)); });

TEST(ForceHead, IsolatedAtomAndSymmetricDimer) {
  auto c = small_config(Variant::gemnet, 3);
  const auto p = init_params(c);
  AtomicSystem one;
  one.positions = {{0.3, 0.1, 0.2}};
  one.atomic_numbers = {6};
  EXPECT_EQ(max_abs(run(one, p, c).forces), 0.0);

  AtomicSystem dimer;
  dimer.positions = {{0, 0, 0}, {1.1, 0, 0}};
  dimer.atomic_numbers = {7, 7};
  const auto f = run(dimer, p, c).forces;
  EXPECT_NEAR(f(0, 0), -f(1, 0), 1e-14);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(f(i, 1), 0.0);
    EXPECT_EQ(f(i, 2), 0.0);
  }
  EXPECT_THROW(force_head(FeatureState{}, GraphTopology{}, Geometry{},
                          init_params(small_config(Variant::dimenet))),
               Error);
}
