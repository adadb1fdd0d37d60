// SPDX-License-Identifier: Apache-2.0
#include "egnpar/bench/generate.hpp"
#include "egnpar/runtime/instrumentation.hpp"

#include "equivalence.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace egnpar;
using namespace testing_support;

namespace {

class Runtime : public ::testing::TestWithParam<Variant> {
protected:
  ModelConfig config(std::uint64_t seed = 0) const { return small_config(GetParam(), seed); }
  Matrix seed_for(const AtomicSystem &s) const { return force_seed_for(s.size(), 1); }
  const Matrix *force_seed(const Matrix &m) const {
    return GetParam() == Variant::gemnet ? &m : nullptr;
  }
};

} // namespace

TEST_P(Runtime, SingleWorkerIsBitwiseSequential) {
  const auto c = config(1);
  const auto p = init_params(c);
  const auto s = generate_system(20, 0.5, 3);
  const auto topo = topology_of(s, c.cutoff);
  const auto fs = seed_for(s);
  WorkerGroup g(1);
  const auto par = run_parallel(g, p, c, topo, s, force_seed(fs));
  const auto seq = run_sequential(p, c, topo, s, force_seed(fs));
  EXPECT_TRUE(bit_equal(par, seq));
}

TEST_P(Runtime, MatchesSequentialOnThirtyAtoms) {
  const auto c = config(2);
  const auto p = init_params(c);
  const auto s = generate_system(30, 0.5, 4);
  const auto topo = topology_of(s, c.cutoff);
  const auto fs = seed_for(s);
  const auto seq = run_sequential(p, c, topo, s, force_seed(fs));
  for (std::size_t workers : {2, 3, 4, 8}) {
    WorkerGroup g(workers);
    const auto par = run_parallel(g, p, c, topo, s, force_seed(fs));
    const auto d = compare(par, seq);
    EXPECT_LE(d.worst, 1e-9) << "P=" << workers << " worst in " << d.where;
  }
}

TEST_P(Runtime, EmptyShardsContributeNothing) {
  const auto c = config(3);
  const auto p = init_params(c);
  AtomicSystem s;
  s.positions = {{0, 0, 0}, {1.0, 0, 0}, {0.4, 0.9, 0}};
  s.atomic_numbers = {8, 1, 1};
  const auto topo = topology_of(s, c.cutoff);
  ASSERT_LT(topo->num_triplets(), 8u);
  const auto fs = seed_for(s);
  const auto seq = run_sequential(p, c, topo, s, force_seed(fs));
  WorkerGroup g(8);
  const auto par = run_parallel(g, p, c, topo, s, force_seed(fs));
  EXPECT_LE(compare(par, seq).worst, 1e-12);

  AtomicSystem lone;
  lone.positions = {{0, 0, 0}};
  lone.atomic_numbers = {6};
  const auto t1 = topology_of(lone, c.cutoff);
  const auto fs1 = seed_for(lone);
  EXPECT_LE(compare(run_parallel(g, p, c, t1, lone, force_seed(fs1)),
                    run_sequential(p, c, t1, lone, force_seed(fs1)))
                .worst,
            1e-12);
}

// tu_sbf only ever touches triplets, so each worker sees a partial gradient
// that only the parameter all-reduce completes.
TEST_P(Runtime, TripletOnlyParameterGradientIsComplete) {
  const auto c = config(4);
  const auto p = init_params(c);
  const auto s = generate_system(16, 0.5, 6);
  const auto topo = topology_of(s, c.cutoff);
  const auto fs = seed_for(s);
  const auto seq = run_sequential(p, c, topo, s, force_seed(fs));
  WorkerGroup g(4);
  ParallelEngine eng(g, p, c, topo, s.atomic_numbers, s.position_matrix(), {true, true});
  const auto grads = eng.backward(1.0, force_seed(fs));
  for (std::size_t b = 0; b < c.blocks; ++b) {
    const auto &want = seq.grads.d_params.blocks[b].tu_sbf.weight;
    ASSERT_GT(max_abs(want), 0.0);
    EXPECT_LE(max_rel_error(grads.d_params.blocks[b].tu_sbf.weight, want), 1e-9);
  }
  // replicas agree bitwise; ParallelEngine::backward throws otherwise
  for (std::size_t r = 1; r < eng.workers(); ++r)
    EXPECT_TRUE(eng.program(r).param_grads().bit_equal(eng.program(0).param_grads()));
}

TEST_P(Runtime, CommunicationMatchesFormula) {
  const auto c = config(5);
  const auto p = init_params(c);
  const auto s = generate_system(24, 0.5, 8);
  const auto topo = topology_of(s, c.cutoff);
  const auto predicted = comm_volume(comm_model_for(*topo, c), c.blocks);
  const auto fs = seed_for(s);
  for (std::size_t workers : {1, 2, 3}) {
    WorkerGroup g(workers);
    const auto out = run_parallel(g, p, c, topo, s, force_seed(fs));
    EXPECT_EQ(out.forward.elements(Phase::forward), predicted.total);
    for (std::uint32_t b = 0; b < c.blocks; ++b)
      EXPECT_EQ(out.forward.elements(Phase::forward, static_cast<int>(b)), predicted.per_block);
    EXPECT_EQ(out.forward.elements(Phase::forward, Level::edge),
              c.blocks * predicted.edge_per_block);
    for (const auto *counters : {&out.forward, &out.backward})
      for (const auto &e : counters->events)
        EXPECT_NE(e.tag.level, Level::triplet);
    // partial gradients of parameters used in sharded stages are summed
    const auto param_elems = out.backward.elements(Phase::backward, Level::parameter);
    EXPECT_GT(param_elems, 0u);
    EXPECT_LE(param_elems, p.count());
    EXPECT_EQ(out.backward.elements(Phase::forward), 0u);
  }
}

TEST_P(Runtime, RepeatedRunsAreBitwiseEqual) {
  const auto c = config(6);
  const auto p = init_params(c);
  const auto s = generate_system(25, 0.5, 9);
  const auto topo = topology_of(s, c.cutoff);
  const auto fs = seed_for(s);
  WorkerGroup g(3);
  const auto a = run_parallel(g, p, c, topo, s, force_seed(fs));
  for (int k = 0; k < 3; ++k)
    EXPECT_TRUE(bit_equal(run_parallel(g, p, c, topo, s, force_seed(fs)), a));
  WorkerGroup other(3);
  EXPECT_TRUE(bit_equal(run_parallel(other, p, c, topo, s, force_seed(fs)), a));
}

TEST_P(Runtime, BlockChecksumsAgreeAcrossRanks) {
  const auto c = config(7);
  const auto p = init_params(c);
  const auto s = generate_system(18, 0.5, 2);
  WorkerGroup g(4);
  ParallelEngine eng(g, p, c, topology_of(s, c.cutoff), s.atomic_numbers, s.position_matrix());
  ASSERT_EQ(eng.forward().block_checksums.size(), c.blocks);
  for (std::size_t r = 1; r < 4; ++r)
    EXPECT_EQ(eng.program(r).block_checksums(), eng.program(0).block_checksums());
}

INSTANTIATE_TEST_SUITE_P(Parallel, Runtime, ::testing::Values(Variant::dimenet, Variant::gemnet),
                         [](const auto &info) { return std::string(to_string(info.param)); });

TEST(Runtime, ReductionFaultIsDetected) {
  const auto c = small_config(Variant::dimenet, 1);
  const auto p = init_params(c);
  const auto s = generate_system(12, 0.5, 1);
  const auto topo = topology_of(s, c.cutoff);
  WorkerGroup g(3, {std::chrono::seconds(5), ReductionFault::skip_last_rank});
  const auto seq = run_sequential(p, c, topo, s, nullptr);
  const auto par = run_parallel(g, p, c, topo, s, nullptr);
  EXPECT_GT(compare(par, seq).worst, 1e-3);
}

TEST(Runtime, NonFiniteParametersSurfaceInBackward) {
  auto c = small_config(Variant::dimenet, 1);
  auto p = init_params(c);
  p.blocks[1].nu.hidden.bias[0] = std::numeric_limits<double>::quiet_NaN();
  const auto s = generate_system(10, 0.5, 1);
  WorkerGroup g(2);
  ParallelEngine eng(g, p, c, topology_of(s, c.cutoff), s.atomic_numbers, s.position_matrix(),
                     {true, false});
  EXPECT_TRUE(std::isnan(eng.forward().energy));
  EXPECT_THROW(eng.backward(), NumericError);
}

TEST(Instrumentation, CsvOutputs) {
  const auto c = small_config(Variant::gemnet, 1);
  const auto p = init_params(c);
  const auto s = generate_system(8, 0.5, 1);
  WorkerGroup g(2);
  ParallelEngine eng(g, p, c, topology_of(s, c.cutoff), s.atomic_numbers, s.position_matrix(),
                     {}, true);
  std::ostringstream coll, times;
  write_collective_csv(coll, eng.forward().counters);
  write_timing_csv(times, eng.timings());
  std::istringstream in(coll.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "phase,level,block,stage,rows,cols,elements");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(line.rfind("forward,", 0), 0u) << line;
  }
  EXPECT_EQ(rows, eng.forward().counters.events.size());
  EXPECT_EQ(times.str().rfind("rank,phase,block,stage,micros\n", 0), 0u);
  EXPECT_NE(times.str().find("\n1,forward,0,"), std::string::npos);
}
