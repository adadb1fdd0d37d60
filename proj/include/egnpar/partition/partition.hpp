// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/graph.hpp"
#include "egnpar/model/config.hpp"

#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

namespace egnpar {

/// Half-open index range [begin, end).
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
  std::vector<std::size_t> list() const {
    std::vector<std::size_t> v(size());
    std::iota(v.begin(), v.end(), begin);
    return v;
  }
  bool operator==(const IndexRange &) const = default;
};

/// Contiguous split of [0, n) into `parts` ranges whose sizes differ by at
/// most one; the first n % parts ranges get the extra element.
inline std::vector<IndexRange> balanced_split(std::size_t n, std::size_t parts) {
  if (parts == 0)
    throw Error("balanced_split: zero parts");
  std::vector<IndexRange> out;
  out.reserve(parts);
  const std::size_t q = n / parts, r = n % parts;
  std::size_t begin = 0;
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t len = q + (p < r ? 1 : 0);
    out.push_back({begin, begin + len});
    begin += len;
  }
  return out;
}

/// Per-worker shards of the triplet, edge and node index sets. Every worker
/// also sees the complete topology; only compute is sharded.
struct GraphPartition {
  std::size_t workers = 1;
  std::vector<IndexRange> triplet_shards;
  std::vector<IndexRange> edge_shards;
  std::vector<IndexRange> node_shards;
  std::shared_ptr<const GraphTopology> topology;
};

inline GraphPartition partition_graph(std::shared_ptr<const GraphTopology> topology,
                                      std::size_t workers) {
  if (workers == 0)
    throw Error("partition_graph: worker count must be >= 1");
  if (!topology)
    throw Error("partition_graph: null topology");
  GraphPartition p;
  p.workers = workers;
  p.triplet_shards = balanced_split(topology->num_triplets(), workers);
  p.edge_shards = balanced_split(topology->num_edges(), workers);
  p.node_shards = balanced_split(topology->num_nodes, workers);
  p.topology = std::move(topology);
  return p;
}

inline GraphPartition partition_graph(const GraphTopology &topology,
                                      std::size_t workers) {
  return partition_graph(std::make_shared<const GraphTopology>(topology), workers);
}

/// Sizes that determine how many elements an EGN forward pass all-reduces.
struct CommModel {
  std::uint64_t n_v = 0, n_e = 0, n_t = 0;
  std::uint64_t d_v = 0, d_e = 0, d_t = 0, d_u = 0;
  Variant variant = Variant::dimenet;

  void validate() const {
    if (n_v == 0 || d_v == 0 || d_e == 0 || d_t == 0 || d_u == 0)
      throw Error("CommModel: node count and all dimensions must be positive");
  }
};

inline CommModel comm_model_for(const GraphTopology &topo, const ModelConfig &c) {
  return {topo.num_nodes, topo.num_edges(), topo.num_triplets(), c.d_v, c.d_e,
          c.d_t,          c.d_u,            c.variant};
}

struct CommVolume {
  std::uint64_t edge_per_block = 0;
  std::uint64_t node_per_block = 0;
  std::uint64_t global_per_block = 0;
  std::uint64_t per_block = 0;
  std::uint64_t total = 0;
};

/// Elements all-reduced by one forward pass. Per block: the aggregated edge
/// buffer, the node buffer and the pooled global vector; gemnet adds a second
/// edge buffer for symmetric message coupling. Triplet sizes never enter.
inline CommVolume comm_volume(const CommModel &m, std::uint64_t blocks) {
  m.validate();
  CommVolume v;
  const std::uint64_t edge_buffers = m.variant == Variant::gemnet ? 2 : 1;
  v.edge_per_block = edge_buffers * m.n_e * m.d_e;
  v.node_per_block = m.n_v * m.d_v;
  v.global_per_block = m.d_u;
  v.per_block = v.edge_per_block + v.node_per_block + v.global_per_block;
  v.total = blocks * v.per_block;
  return v;
}

} // namespace egnpar
