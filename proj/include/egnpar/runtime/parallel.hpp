// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/gradients/gradients.hpp"
#include "egnpar/model/engine.hpp"
#include "egnpar/partition/partition.hpp"
#include "egnpar/runtime/worker_group.hpp"

#include <bit>
#include <memory>
#include <optional>
#include <vector>

namespace egnpar {

/// Outputs of a parallel forward pass, taken from rank 0 after checking that
/// every rank holds the same values.
struct ParallelForward {
  double energy = 0.0;
  std::optional<Matrix> direct_forces;
  /// Replicated buffers, plus the triplet buffer assembled from the shards in
  /// rank order (for inspection; the runtime itself never moves it).
  FeatureState state;
  std::vector<std::uint64_t> block_checksums;
  /// Collectives issued by the forward pass.
  CommCounters counters;
};

/// One forward/backward pair on a WorkerGroup. Each rank records its own tape
/// over its triplet, edge and node shards; the tapes live until the engine is
/// destroyed so that backward can follow forward.
class ParallelEngine {
public:
  ParallelEngine(WorkerGroup &group, const ModelParams &params, const ModelConfig &config,
                 std::shared_ptr<const GraphTopology> topology,
                 std::span<const int> atomic_numbers, const Matrix &positions,
                 Program::Options opts = {}, bool record_timings = false)
      : group_(group), params_(params),
        partition_(partition_graph(std::move(topology), group.size())),
        programs_(group.size()) {
    const std::vector<int> z(atomic_numbers.begin(), atomic_numbers.end());
    group_.collective().reset_counters();
    group_.run([&](std::size_t rank) {
      WorkerContext ctx;
      ctx.rank = rank;
      ctx.collective = &group_.collective();
      ctx.triplets = partition_.triplet_shards[rank];
      ctx.edges = partition_.edge_shards[rank];
      ctx.nodes = partition_.node_shards[rank];
      ctx.record_timings = record_timings;
      ctx.annotate_errors = true;
      programs_[rank] = std::make_unique<Program>(params_, config, partition_.topology,
                                                  z, positions, std::move(ctx), opts);
    });
    forward_ = collect_forward();
  }

  const ParallelForward &forward() const noexcept { return forward_; }
  const GraphPartition &partition() const noexcept { return partition_; }
  std::size_t workers() const noexcept { return programs_.size(); }
  const Program &program(std::size_t rank) const { return *programs_.at(rank); }

  /// Runs backward on every rank and returns the replicated gradients.
  GradientBundle backward(double energy_seed = 1.0, const Matrix *force_seed = nullptr,
                          bool verify_replay = false) {
    group_.collective().reset_counters();
    std::vector<GradientBundle> per_rank(programs_.size());
    group_.run([&](std::size_t rank) {
      per_rank[rank] = egnpar::backward(*programs_[rank], energy_seed, force_seed,
                                        verify_replay);
    });
    backward_counters_ = group_.collective().counters();
    for (std::size_t r = 1; r < per_rank.size(); ++r)
      if (!per_rank[r].d_params.bit_equal(per_rank[0].d_params) ||
          !per_rank[r].d_positions.bit_equal(per_rank[0].d_positions))
        throw InternalError("replica divergence: rank " + std::to_string(r) +
                            " gradients differ from rank 0");
    return std::move(per_rank[0]);
  }

  const CommCounters &backward_counters() const noexcept { return backward_counters_; }

  /// Per-stage wall times of every rank.
  std::vector<std::vector<StageTiming>> timings() const {
    std::vector<std::vector<StageTiming>> out;
    for (const auto &p : programs_)
      out.push_back(p->context().timings);
    return out;
  }

private:
  ParallelForward collect_forward() const {
    const Program &p0 = *programs_[0];
    ParallelForward f;
    f.energy = p0.energy();
    f.state = p0.state();
    f.block_checksums = p0.block_checksums();
    if (p0.has_direct_forces())
      f.direct_forces = p0.direct_forces();
    for (std::size_t r = 1; r < programs_.size(); ++r) {
      const Program &p = *programs_[r];
      const FeatureState s = p.state();
      const auto &cs = p.block_checksums();
      for (std::size_t b = 0; b < cs.size(); ++b)
        if (cs[b] != f.block_checksums[b])
          throw InternalError("replica divergence after block " + std::to_string(b) +
                              ": rank " + std::to_string(r) + " differs from rank 0");
      const bool same = std::bit_cast<std::uint64_t>(p.energy()) ==
                            std::bit_cast<std::uint64_t>(f.energy) &&
                        s.global.bit_equal(f.state.global) &&
                        s.node.bit_equal(f.state.node) && s.edge.bit_equal(f.state.edge) &&
                        (!f.direct_forces || p.direct_forces().bit_equal(*f.direct_forces));
      if (!same)
        throw InternalError("replica divergence in outputs: rank " + std::to_string(r) +
                            " differs from rank 0");
    }
    // Triplet shards are contiguous, so rank order is triplet order.
    std::size_t rows = 0;
    for (const auto &p : programs_)
      rows += p->state().triplet.rows();
    Matrix trip(rows, f.state.triplet.cols());
    std::size_t at = 0;
    for (const auto &p : programs_) {
      const Matrix t = p->state().triplet;
      for (std::size_t i = 0; i < t.rows(); ++i, ++at)
        std::copy(t.row(i).begin(), t.row(i).end(), trip.row(at).begin());
    }
    f.state.triplet = std::move(trip);
    f.counters = group_.collective().counters();
    return f;
  }

  WorkerGroup &group_;
  const ModelParams &params_;
  GraphPartition partition_;
  std::vector<std::unique_ptr<Program>> programs_;
  ParallelForward forward_;
  CommCounters backward_counters_;
};

/// Forward pass only.
inline ParallelForward parallel_forward(WorkerGroup &group, const ModelParams &params,
                                        const ModelConfig &config,
                                        std::shared_ptr<const GraphTopology> topology,
                                        std::span<const int> atomic_numbers,
                                        const Matrix &positions) {
  ParallelEngine eng(group, params, config, std::move(topology), atomic_numbers,
                     positions);
  return eng.forward();
}

/// Backward of a completed forward: dE/dtheta and dE/dx, replicated.
inline GradientBundle parallel_backward(ParallelEngine &engine, double energy_seed = 1.0,
                                        const Matrix *force_seed = nullptr) {
  return engine.backward(energy_seed, force_seed);
}

} // namespace egnpar
