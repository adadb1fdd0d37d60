// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/basis.hpp"
#include "egnpar/atomgraph/graph.hpp"
#include "egnpar/autodiff/ops.hpp"
#include "egnpar/model/config.hpp"
#include "egnpar/model/params.hpp"
#include "egnpar/partition/partition.hpp"
#include "egnpar/runtime/collective.hpp"

#include <chrono>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace egnpar {

/// Feature buffers of one graph. `triplet` holds every triplet in the
/// sequential engine and only the worker's shard in the parallel one.
struct FeatureState {
  Matrix global;  // 1 x D_u
  Matrix node;    // N_v x D_v
  Matrix edge;    // N_e x D_e
  Matrix triplet; // N_t x D_t

  bool all_finite() const {
    return global.all_finite() && node.all_finite() && edge.all_finite() &&
           triplet.all_finite();
  }
};

/// Wall time of one compute or communication stage.
struct StageTiming {
  Phase phase;
  int block;
  std::string stage;
  double micros;
};

/// What one worker computes and how it reaches the others. The sequential
/// engine is a single worker owning every index over a LocalCollective.
struct WorkerContext {
  std::size_t rank = 0;
  Collective *collective = nullptr;
  IndexRange triplets;
  IndexRange edges;
  IndexRange nodes;
  bool record_timings = false;
  /// Rethrow failures as WorkerError naming rank and stage.
  bool annotate_errors = false;

  // Updated while building, for diagnostics and instrumentation.
  int block = -1;
  std::string stage = "init";
  std::vector<StageTiming> timings;

  CollectiveTag tag(Level level, Phase phase) const {
    return {level, phase, block, stage};
  }
};

inline WorkerContext sequential_context(const GraphTopology &topo,
                                        Collective &collective) {
  WorkerContext ctx;
  ctx.collective = &collective;
  ctx.triplets = {0, topo.num_triplets()};
  ctx.edges = {0, topo.num_edges()};
  ctx.nodes = {0, topo.num_nodes};
  return ctx;
}

namespace detail {

/// Index lists for one worker, derived once from the topology and its shard.
struct ShardPlan {
  ad::Index edge_pairs;     // (s, r) for every edge
  ad::Index edge_receivers; // receiver of every edge
  ad::Index reverse;        // reverse edge of every edge (gemnet only)
  ad::Index trip_kji;       // (k, j, i) for local triplets
  ad::Index trip_in;        // in-edge of local triplets
  ad::Index trip_out;       // out-edge of local triplets
  ad::Index node_ids;       // local nodes
  ad::Index node_in_edges;  // edges whose receiver is local, in edge order
  ad::Index node_in_slot;   // local slot of that receiver
  ad::Index edge_ids;       // local edges
  ad::Index edge_recv_ids;  // receivers of local edges
  ad::Index species;        // z - 1 per node

  ShardPlan(const GraphTopology &topo, std::span<const int> atomic_numbers,
            const WorkerContext &ctx, bool need_reverse) {
    std::vector<std::size_t> pairs, recv, kji, tin, tout, nin, nslot, eids, erecv, sp;
    pairs.reserve(2 * topo.num_edges());
    for (const auto &e : topo.edges) {
      pairs.push_back(e.source);
      pairs.push_back(e.receiver);
      recv.push_back(e.receiver);
    }
    for (std::size_t t = ctx.triplets.begin; t < ctx.triplets.end; ++t) {
      const auto &tr = topo.triplets[t];
      const auto &in = topo.edges[tr.in_edge];
      const auto &out = topo.edges[tr.out_edge];
      kji.insert(kji.end(), {in.source, in.receiver, out.receiver});
      tin.push_back(tr.in_edge);
      tout.push_back(tr.out_edge);
    }
    for (std::size_t e = 0; e < topo.num_edges(); ++e)
      if (ctx.nodes.contains(topo.edges[e].receiver)) {
        nin.push_back(e);
        nslot.push_back(topo.edges[e].receiver - ctx.nodes.begin);
      }
    for (std::size_t e = ctx.edges.begin; e < ctx.edges.end; ++e) {
      eids.push_back(e);
      erecv.push_back(topo.edges[e].receiver);
    }
    if (atomic_numbers.size() != topo.num_nodes)
      throw ShapeError("atomic numbers do not match node count");
    for (int z : atomic_numbers) {
      if (z < 1 || z > kNumElements)
        throw Error("atomic number " + std::to_string(z) +
                    " outside the embedding table (1..118)");
      sp.push_back(static_cast<std::size_t>(z - 1));
    }
    edge_pairs = ad::make_index(std::move(pairs));
    edge_receivers = ad::make_index(std::move(recv));
    reverse = ad::make_index(need_reverse ? topo.reverse_edges()
                                          : std::vector<std::size_t>{});
    trip_kji = ad::make_index(std::move(kji));
    trip_in = ad::make_index(std::move(tin));
    trip_out = ad::make_index(std::move(tout));
    node_ids = ad::make_index(ctx.nodes.list());
    node_in_edges = ad::make_index(std::move(nin));
    node_in_slot = ad::make_index(std::move(nslot));
    edge_ids = ad::make_index(std::move(eids));
    edge_recv_ids = ad::make_index(std::move(erecv));
    species = ad::make_index(std::move(sp));
  }
};

/// Identity on the way forward. On the way back the partial gradients that
/// each worker's sharded consumers produced are all-reduced, so the replicated
/// input receives the full adjoint on every worker.
inline ad::Var shard_entry(ad::Tape &t, WorkerContext &ctx, ad::Var x, Level level) {
  Collective *c = ctx.collective;
  const std::size_t rank = ctx.rank;
  const CollectiveTag tag = ctx.tag(level, Phase::backward);
  return t.record(
      "shard_entry", {x}, [x](const ad::Tape &tp) { return tp.value(x); },
      [x, c, rank, tag](ad::Tape &tp, const Matrix &g) {
        tp.accumulate(x, c->allreduce_sum(rank, g, tag));
      },
      ad::Comm::backward);
}

/// Sum over workers. Adjoint: the upstream gradient, unchanged, on each worker.
inline ad::Var allreduce(ad::Tape &t, WorkerContext &ctx, ad::Var x, Level level) {
  Collective *c = ctx.collective;
  const std::size_t rank = ctx.rank;
  const CollectiveTag tag = ctx.tag(level, Phase::forward);
  return t.record(
      "allreduce", {x},
      [x, c, rank, tag](const ad::Tape &tp) {
        return c->allreduce_sum(rank, tp.value(x), tag);
      },
      [x](ad::Tape &tp, const Matrix &g) { tp.accumulate(x, g); },
      ad::Comm::forward);
}

/// Tape leaves for parameter tensors, created on first use. `sharded` returns
/// a shard_entry of the leaf for use inside per-worker shards.
class ParamVars {
public:
  ParamVars(ad::Tape &tape, WorkerContext &ctx, bool requires_grad)
      : tape_(tape), ctx_(ctx), requires_grad_(requires_grad) {}

  ad::Var get(const Matrix &m) {
    auto it = leaves_.find(&m);
    if (it != leaves_.end())
      return it->second;
    const auto v = tape_.leaf(m, requires_grad_, "param");
    leaves_.emplace(&m, v);
    return v;
  }

  ad::Var sharded(const Matrix &m) {
    auto it = shards_.find(&m);
    if (it != shards_.end())
      return it->second;
    const auto v = shard_entry(tape_, ctx_, get(m), Level::parameter);
    shards_.emplace(&m, v);
    return v;
  }

  ad::Var linear(ad::Var x, const Linear &l, bool sharded) {
    auto w = sharded ? this->sharded(l.weight) : get(l.weight);
    std::optional<ad::Var> b;
    if (l.has_bias())
      b = sharded ? this->sharded(l.bias) : get(l.bias);
    return ad::linear(tape_, x, w, b);
  }

  ad::Var mlp(ad::Var x, const Mlp &m, bool sharded) {
    return linear(ad::silu(tape_, linear(x, m.hidden, sharded)), m.out, sharded);
  }

  /// Gradient of every tensor of `params` (zero where the tape never used it).
  ModelParams gradients(const ModelParams &params) const {
    ModelParams g = params.zeros_like();
    std::vector<Matrix *> dst;
    g.for_each([&](const std::string &, Matrix &m, std::size_t) { dst.push_back(&m); });
    std::size_t i = 0;
    params.for_each([&](const std::string &, const Matrix &m, std::size_t) {
      auto it = leaves_.find(&m);
      if (it != leaves_.end())
        *dst[i] = tape_.grad_or_zero(it->second);
      ++i;
    });
    return g;
  }

private:
  ad::Tape &tape_;
  WorkerContext &ctx_;
  bool requires_grad_;
  std::unordered_map<const Matrix *, ad::Var> leaves_;
  std::unordered_map<const Matrix *, ad::Var> shards_;
};

/// Records wall time for the enclosing stage when the context asks for it.
class StageScope {
public:
  StageScope(WorkerContext &ctx, std::string name, Phase phase = Phase::forward)
      : ctx_(ctx), phase_(phase), start_(std::chrono::steady_clock::now()) {
    ctx_.stage = std::move(name);
  }
  ~StageScope() {
    if (ctx_.record_timings) {
      const auto dt = std::chrono::steady_clock::now() - start_;
      ctx_.timings.push_back(
          {phase_, ctx_.block, ctx_.stage,
           std::chrono::duration<double, std::micro>(dt).count()});
    }
  }
  StageScope(const StageScope &) = delete;
  StageScope &operator=(const StageScope &) = delete;

private:
  WorkerContext &ctx_;
  Phase phase_;
  std::chrono::steady_clock::time_point start_;
};

/// Tape variables of one feature state.
struct StateVars {
  ad::Var global, node, edge, triplet;
};

/// Basis inputs of the triplet stage, restricted to the worker's triplets.
struct TripletInputs {
  ad::Var rbf_out; // out-edge RBF rows, T_p x K
  ad::Var sbf;     // T_p x K*L
};

/// One EGN block: TU -> TA -> EU -> EA -> NU -> GU, and for gemnet the
/// second edge update and symmetric coupling. Collectives per block:
/// aggregated edge buffer, node buffer, pooled global vector, and for gemnet
/// one more edge buffer.
inline StateVars build_block(ad::Tape &t, WorkerContext &ctx, const ShardPlan &plan,
                             ParamVars &pv, const BlockParams &bp, Variant variant,
                             const StateVars &in, const TripletInputs &tin,
                             std::size_t num_nodes, std::size_t num_edges) {
  StateVars out;
  ad::Var agg;
  {
    StageScope s(ctx, "triplet-update");
    const auto m_sh = shard_entry(t, ctx, in.edge, Level::edge);
    const auto m_kj = ad::gather_rows(t, m_sh, plan.trip_in);
    const auto down = ad::silu(t, pv.linear(m_kj, bp.tu_down, true));
    const auto g_sbf = pv.linear(tin.sbf, bp.tu_sbf, true);
    const auto g_rbf = pv.linear(tin.rbf_out, bp.tu_rbf, true);
    ad::Var h;
    if (variant == Variant::dimenet) {
      h = ad::mul(t, ad::mul(t, down, g_sbf), g_rbf);
    } else {
      const auto basis = ad::mul(t, g_sbf, g_rbf);
      const auto left = pv.linear(down, bp.bil_left, true);
      const auto right = pv.linear(basis, bp.bil_right, true);
      h = pv.linear(ad::mul(t, left, right), bp.bil_out, true);
    }
    out.triplet = h;
    const auto y = pv.linear(h, bp.tu_up, true);
    agg = ad::scatter_add_rows(t, y, plan.trip_out, num_edges);
  }
  {
    StageScope s(ctx, "triplet-aggregate-allreduce");
    agg = allreduce(t, ctx, agg, Level::edge);
  }
  ad::Var m1;
  {
    StageScope s(ctx, "edge-update");
    m1 = ad::add(t, in.edge, pv.mlp(ad::concat_cols(t, in.edge, agg), bp.eu, false));
  }
  ad::Var v1_local, v1;
  {
    StageScope s(ctx, "edge-aggregate+node-update");
    const auto m1_sh = shard_entry(t, ctx, m1, Level::edge);
    const auto v_sh = shard_entry(t, ctx, in.node, Level::node);
    const auto msgs = ad::gather_rows(t, m1_sh, plan.node_in_edges);
    const auto h_nodes =
        ad::scatter_add_rows(t, msgs, plan.node_in_slot, plan.node_ids->size());
    const auto v_local = ad::gather_rows(t, v_sh, plan.node_ids);
    v1_local = ad::add(
        t, v_local, pv.mlp(ad::concat_cols(t, v_local, h_nodes), bp.nu, true));
    v1 = ad::scatter_add_rows(t, v1_local, plan.node_ids, num_nodes);
  }
  {
    StageScope s(ctx, "node-allreduce");
    v1 = allreduce(t, ctx, v1, Level::node);
  }
  {
    StageScope s(ctx, "global-update");
    auto pooled = ad::sum_rows(t, pv.linear(v1_local, bp.pool, true));
    pooled = allreduce(t, ctx, pooled, Level::global);
    out.global = ad::add(t, in.global, pv.mlp(pooled, bp.gu, false));
  }
  out.node = v1;
  if (variant == Variant::dimenet) {
    out.edge = m1;
    return out;
  }
  ad::Var m2;
  {
    StageScope s(ctx, "second-edge-update");
    const auto m1_sh = shard_entry(t, ctx, m1, Level::edge);
    const auto v1_sh = shard_entry(t, ctx, v1, Level::node);
    const auto m_local = ad::gather_rows(t, m1_sh, plan.edge_ids);
    const auto v_recv = ad::gather_rows(t, v1_sh, plan.edge_recv_ids);
    const auto m2_local = ad::add(
        t, m_local, pv.mlp(ad::concat_cols(t, m_local, v_recv), bp.eu2, true));
    m2 = ad::scatter_add_rows(t, m2_local, plan.edge_ids, num_edges);
  }
  {
    StageScope s(ctx, "symmetric-allreduce");
    m2 = allreduce(t, ctx, m2, Level::edge);
  }
  {
    StageScope s(ctx, "symmetric-coupling");
    const auto rev = ad::gather_rows(t, m2, plan.reverse);
    out.edge = ad::add(t, m2, pv.linear(rev, bp.sym, false));
  }
  return out;
}

} // namespace detail

/// One complete forward pass for one worker, recorded on a tape that can be
/// differentiated afterwards. With a LocalCollective and full ranges this is
/// the sequential engine.
///
/// `params` must outlive the program.
class Program {
public:
  struct Options {
    bool param_grads = false;
    bool position_grads = false;
  };

  Program(const ModelParams &params, const ModelConfig &config,
          std::shared_ptr<const GraphTopology> topology,
          std::span<const int> atomic_numbers, const Matrix &positions,
          WorkerContext ctx, Options opts)
      : params_(&params), config_(config), topology_(std::move(topology)),
        ctx_(std::move(ctx)), pv_(tape_, ctx_, opts.param_grads) {
    if (!(params.shape == config.shape()))
      throw ShapeError("parameters do not match the model configuration");
    if (ctx_.collective == nullptr)
      throw Error("Program: worker context has no collective");
    if (positions.rows() != topology_->num_nodes || positions.cols() != 3)
      throw ShapeError("positions must be N_v x 3");
    guarded([&] { build(atomic_numbers, positions, opts.position_grads); });
  }

  double energy() const { return tape_.value(energy_)[0]; }

  /// Direct forces of the force head (gemnet only).
  const Matrix &direct_forces() const {
    if (!forces_)
      throw Error("direct forces are only produced by the force-centric variant");
    return tape_.value(*forces_);
  }
  bool has_direct_forces() const noexcept { return forces_.has_value(); }

  FeatureState state() const {
    return {tape_.value(state_.global), tape_.value(state_.node),
            tape_.value(state_.edge), tape_.value(state_.triplet)};
  }

  /// Checksum of (edge, node, global) after every block.
  const std::vector<std::uint64_t> &block_checksums() const noexcept {
    return checksums_;
  }

  /// Reverse sweep from dL/dE = energy_seed and, for the force-centric
  /// variant, dL/dF = *force_seed.
  void backward(double energy_seed, const Matrix *force_seed = nullptr,
                bool verify_replay = false) {
    std::vector<ad::Seed> seeds;
    seeds.push_back({energy_, Matrix(1, 1, energy_seed)});
    if (force_seed) {
      if (!forces_)
        throw Error("force seed given but the model has no force head");
      seeds.push_back({*forces_, *force_seed});
    }
    ctx_.block = -1;
    guarded([&] {
      detail::StageScope s(ctx_, "backward", Phase::backward);
      tape_.backward(seeds, verify_replay);
    });
    backward_done_ = true;
  }

  ModelParams param_grads() const {
    require_backward();
    return pv_.gradients(*params_);
  }
  Matrix position_grads() const {
    require_backward();
    return tape_.grad_or_zero(positions_);
  }

  ad::Tape &tape() noexcept { return tape_; }
  const WorkerContext &context() const noexcept { return ctx_; }
  const ModelConfig &config() const noexcept { return config_; }

private:
  template <typename Fn> void guarded(Fn &&fn) {
    if (!ctx_.annotate_errors) {
      fn();
      return;
    }
    try {
      fn();
    } catch (const WorkerError &) {
      throw;
    } catch (const std::exception &e) {
      throw WorkerError(ctx_.rank, ctx_.stage, ctx_.block, e.what());
    }
  }

  void require_backward() const {
    if (!backward_done_)
      throw Error("backward has not been run");
  }

  void build(std::span<const int> z, const Matrix &positions, bool pos_grad) {
    const auto &topo = *topology_;
    const auto &p = *params_;
    const bool gem = config_.variant == Variant::gemnet;
    const detail::ShardPlan plan(topo, z, ctx_, gem);
    const RadialBasis basis = config_.radial_basis();
    auto &t = tape_;

    detail::StateVars st;
    detail::TripletInputs tin;
    {
      detail::StageScope s(ctx_, "init");
      positions_ = t.leaf(positions, pos_grad, "positions");
      const auto d = ad::edge_lengths(t, positions_, plan.edge_pairs);
      const auto rbf = ad::radial_basis(t, d, basis);

      const auto pos_sh = detail::shard_entry(t, ctx_, positions_, Level::node);
      const auto d_sh = detail::shard_entry(t, ctx_, d, Level::edge);
      const auto rbf_sh = detail::shard_entry(t, ctx_, rbf, Level::edge);
      const auto angles = ad::bond_angles(t, pos_sh, plan.trip_kji);
      const auto d_in = ad::gather_rows(t, d_sh, plan.trip_in);
      tin.sbf = ad::spherical_basis(t, d_in, angles, basis, config_.l_sbf);
      tin.rbf_out = ad::gather_rows(t, rbf_sh, plan.trip_out);

      st.node = ad::gather_rows(t, pv_.get(p.atom_embedding), plan.species);
      st.edge = pv_.linear(rbf, p.edge_init, false);
      st.global = t.leaf(Matrix(1, config_.d_u), false, "global0");
      st.triplet = t.leaf(Matrix(plan.trip_in->size(), config_.d_t), false, "triplet0");
    }

    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
      ctx_.block = static_cast<int>(b);
      st = detail::build_block(t, ctx_, plan, pv_, p.blocks[b], config_.variant,
                               st, tin, topo.num_nodes, topo.num_edges());
      checksums_.push_back(checksum(t.value(st.edge)) ^
                           (checksum(t.value(st.node)) * 3) ^
                           (checksum(t.value(st.global)) * 7));
    }
    ctx_.block = -1;

    {
      detail::StageScope s(ctx_, "readout");
      if (config_.diagnostic)
        energy_ = ad::sum_rows(t, pv_.linear(st.edge, p.edge_energy_head, false));
      else
        energy_ = pv_.linear(st.global, p.energy_head, false);
      if (gem) {
        const auto s_e = pv_.linear(st.edge, p.force_head, false);
        const auto u = ad::edge_unit_vectors(t, positions_, plan.edge_pairs);
        forces_ = ad::scatter_add_rows(t, ad::scale_rows(t, u, s_e),
                                       plan.edge_receivers, topo.num_nodes);
      }
    }
    state_ = st;
  }

  const ModelParams *params_;
  ModelConfig config_;
  std::shared_ptr<const GraphTopology> topology_;
  WorkerContext ctx_;
  ad::Tape tape_;
  detail::ParamVars pv_;
  ad::Var positions_;
  ad::Var energy_;
  std::optional<ad::Var> forces_;
  detail::StateVars state_;
  std::vector<std::uint64_t> checksums_;
  bool backward_done_ = false;
};

/// Single-worker evaluation over a LocalCollective.
class SequentialEngine {
public:
  SequentialEngine(const ModelParams &params, const ModelConfig &config,
                   std::shared_ptr<const GraphTopology> topology,
                   std::span<const int> atomic_numbers, const Matrix &positions,
                   Program::Options opts = {})
      : collective_(std::make_unique<LocalCollective>()),
        program_(params, config, topology, atomic_numbers, positions,
                 sequential_context(*topology, *collective_), opts) {}

  Program &program() noexcept { return program_; }
  const Program &program() const noexcept { return program_; }
  const CommCounters &counters() const noexcept { return collective_->counters(); }

private:
  std::unique_ptr<LocalCollective> collective_;
  Program program_;
};

// ---------------------------------------------------------------------------
// Stage-level entry points on plain matrices. They record a throwaway tape.

/// Node rows from the atom embedding, edge rows from a linear map of the RBF,
/// zero triplet and global buffers.
inline FeatureState init_features(const GraphTopology &topology,
                                  const BasisFeatures &basis,
                                  std::span<const int> atomic_numbers,
                                  const ModelParams &params) {
  LocalCollective local;
  auto ctx = sequential_context(topology, local);
  const detail::ShardPlan plan(topology, atomic_numbers, ctx, false);
  ad::Tape t;
  detail::ParamVars pv(t, ctx, false);
  const auto rbf = t.leaf(basis.edge_rbf, false);
  FeatureState s;
  s.node = t.value(ad::gather_rows(t, pv.get(params.atom_embedding), plan.species));
  s.edge = t.value(pv.linear(rbf, params.edge_init, false));
  s.global = Matrix(1, params.shape.d_u);
  s.triplet = Matrix(topology.num_triplets(), params.shape.d_t);
  return s;
}

/// One block applied to `state`. The basis must be computed with the same
/// radial basis as the parameters were trained with.
inline FeatureState egn_block_forward(const FeatureState &state,
                                      const GraphTopology &topology,
                                      const BasisFeatures &basis,
                                      const BlockParams &block, Variant variant) {
  LocalCollective local;
  auto ctx = sequential_context(topology, local);
  // species are not used by a block
  const std::vector<int> z(topology.num_nodes, 1);
  const detail::ShardPlan plan(topology, z, ctx, variant == Variant::gemnet);
  ad::Tape t;
  detail::ParamVars pv(t, ctx, false);
  detail::StateVars in{t.leaf(state.global, false), t.leaf(state.node, false),
                       t.leaf(state.edge, false), t.leaf(state.triplet, false)};
  detail::TripletInputs tin;
  tin.sbf = t.leaf(basis.triplet_sbf, false);
  tin.rbf_out = ad::gather_rows(t, t.leaf(basis.edge_rbf, false), plan.trip_out);
  ctx.block = 0;
  const auto out = detail::build_block(t, ctx, plan, pv, block, variant, in, tin,
                                       topology.num_nodes, topology.num_edges());
  return {t.value(out.global), t.value(out.node), t.value(out.edge),
          t.value(out.triplet)};
}

/// E = w . u + b.
inline double energy_readout(const FeatureState &state, const ModelParams &params) {
  const auto &h = params.energy_head;
  double e = h.bias[0];
  for (std::size_t k = 0; k < state.global.cols(); ++k)
    e += state.global[k] * h.weight(k, 0);
  return e;
}

/// f_i = sum over edges (j -> i) of (w . m_ji + b) * unit(x_i - x_j).
inline Matrix force_head(const FeatureState &state, const GraphTopology &topology,
                         const Geometry &geometry, const ModelParams &params) {
  if (params.shape.variant != Variant::gemnet)
    throw Error("force_head: the model has no force head");
  const auto &h = params.force_head;
  Matrix f(topology.num_nodes, 3);
  for (std::size_t e = 0; e < topology.num_edges(); ++e) {
    double s = h.bias[0];
    for (std::size_t k = 0; k < state.edge.cols(); ++k)
      s += state.edge(e, k) * h.weight(k, 0);
    const auto r = topology.edges[e].receiver;
    for (int c = 0; c < 3; ++c)
      f(r, c) += s * geometry.unit_vectors[e][c];
  }
  return f;
}

} // namespace egnpar
