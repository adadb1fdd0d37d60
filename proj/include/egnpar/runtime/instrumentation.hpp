// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/model/engine.hpp"
#include "egnpar/runtime/collective.hpp"

#include <ostream>
#include <vector>

namespace egnpar {

/// One row per collective: phase,level,block,stage,rows,cols,elements
inline void write_collective_csv(std::ostream &out, const CommCounters &counters) {
  out << "phase,level,block,stage,rows,cols,elements\n";
  for (const auto &e : counters.events)
    out << to_string(e.tag.phase) << ',' << to_string(e.tag.level) << ',' << e.tag.block
        << ',' << e.tag.stage << ',' << e.rows << ',' << e.cols << ',' << e.elements()
        << '\n';
}

/// One row per timed stage and rank: rank,phase,block,stage,micros
inline void write_timing_csv(std::ostream &out,
                             const std::vector<std::vector<StageTiming>> &per_rank) {
  out << "rank,phase,block,stage,micros\n";
  for (std::size_t r = 0; r < per_rank.size(); ++r)
    for (const auto &t : per_rank[r])
      out << r << ',' << to_string(t.phase) << ',' << t.block << ',' << t.stage << ','
          << t.micros << '\n';
}

} // namespace egnpar
