// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/bench/generate.hpp"
#include "egnpar/models/models.hpp"
#include "egnpar/partition/partition.hpp"
#include "egnpar/runtime/parallel.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace egnpar {

/// Growth of (blocks, node, edge, triplet, bilinear) dims per worker-count
/// step 1, 2, 4, 8 in the reference GemNet-T scaling study.
struct ScalingRow {
  std::uint32_t blocks, d_v, d_e, d_t, d_bil;
};
inline constexpr std::array<ScalingRow, 4> kScalingTable = {{
    {3, 1280, 768, 128, 64},
    {4, 1536, 1024, 192, 96},
    {6, 1792, 1184, 288, 160},
    {8, 2320, 1302, 512, 288},
}};

/// Row of kScalingTable used for P workers: floor(log2 P), capped at the last row.
inline std::size_t scaling_row(std::size_t workers) {
  std::size_t r = 0;
  while ((std::size_t{2} << r) <= workers && r + 1 < kScalingTable.size())
    ++r;
  return r;
}

/// `base` rescaled by the ratio between the table row for P and the first row.
inline ModelConfig scaled_config(const ModelConfig &base, std::size_t workers) {
  const auto &r0 = kScalingTable[0];
  const auto &r = kScalingTable[scaling_row(workers)];
  auto scale = [](std::uint32_t v, std::uint32_t num, std::uint32_t den) {
    const double x = std::round(static_cast<double>(v) * num / den);
    return static_cast<std::uint32_t>(std::max(1.0, x));
  };
  ModelConfig c = base;
  c.blocks = scale(base.blocks, r.blocks, r0.blocks);
  c.d_v = scale(base.d_v, r.d_v, r0.d_v);
  c.d_e = scale(base.d_e, r.d_e, r0.d_e);
  c.d_t = scale(base.d_t, r.d_t, r0.d_t);
  c.d_bil = scale(base.d_bil, r.d_bil, r0.d_bil);
  c.workers = static_cast<std::uint32_t>(workers);
  return c;
}

inline std::string config_label(const ModelConfig &c) {
  std::ostringstream os;
  os << to_string(c.variant) << "-B" << c.blocks << "-v" << c.d_v << "-e" << c.d_e << "-t"
     << c.d_t << "-b" << c.d_bil;
  return os.str();
}

struct BenchRow {
  std::size_t workers = 1;
  std::string label;
  std::size_t params = 0;
  double median_ms = 0.0;
  double throughput = 0.0; // graphs per second
  std::uint64_t allreduced_elements = 0;
  double efficiency = 0.0;

  bool operator==(const BenchRow &) const = default;
};

struct BenchOptions {
  ModelConfig base;
  std::vector<std::size_t> workers = {1, 2, 4, 8};
  std::size_t atoms = 32;
  std::uint64_t system_seed = 1;
  std::size_t warmup = 2;
  std::size_t iterations = 10;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  /// Forward all-reduce volume predicted for each row.
  std::vector<std::uint64_t> predicted_elements;
};

inline BenchOptions default_bench_options() {
  BenchOptions o;
  o.base.variant = Variant::gemnet;
  o.base.blocks = 3;
  o.base.d_u = 4;
  o.base.d_v = 40;
  o.base.d_e = 24;
  o.base.d_t = 8;
  o.base.d_bil = 4;
  return o;
}

/// Weak scaling: for each P the model is grown per kScalingTable and one
/// forward+backward pass on a fixed system is timed. Graph construction and
/// worker start-up are outside the timed region. efficiency = t(1) / t(P)
/// where t(1) is the first row.
inline BenchReport run_weak_scaling(const BenchOptions &o) {
  if (o.workers.empty() || o.workers.front() != 1 ||
      !std::is_sorted(o.workers.begin(), o.workers.end()))
    throw Error("bench: worker list must be ascending and start at 1");
  if (o.iterations == 0)
    throw Error("bench: need at least one timed iteration");
  const AtomicSystem sys = generate_system(o.atoms, 0.5, o.system_seed);
  const auto topo = std::make_shared<const GraphTopology>(
      build_graph(sys, o.base.cutoff).topology);
  const Matrix pos = sys.position_matrix();

  BenchReport rep;
  for (std::size_t p : o.workers) {
    const ModelConfig c = scaled_config(o.base, p);
    c.validate();
    const ModelParams params = init_params(c);
    WorkerGroup group(p);
    const Program::Options opts{true, energy_centric(c.variant)};

    std::uint64_t measured = 0;
    auto once = [&] {
      ParallelEngine eng(group, params, c, topo, sys.atomic_numbers, pos, opts);
      measured = eng.forward().counters.elements(Phase::forward);
      (void)eng.backward(1.0);
    };
    for (std::size_t i = 0; i < o.warmup; ++i)
      once();
    std::vector<double> ms;
    for (std::size_t i = 0; i < o.iterations; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      once();
      ms.push_back(std::chrono::duration<double, std::milli>(
                       std::chrono::steady_clock::now() - t0)
                       .count());
    }
    std::sort(ms.begin(), ms.end());
    const std::size_t n = ms.size();
    const double median = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);

    BenchRow row;
    row.workers = p;
    row.label = config_label(c);
    row.params = params.count();
    row.median_ms = median;
    row.throughput = 1000.0 / median;
    row.allreduced_elements = measured;
    row.efficiency = rep.rows.empty() ? 1.0 : rep.rows.front().median_ms / median;
    rep.rows.push_back(row);
    rep.predicted_elements.push_back(comm_volume(comm_model_for(*topo, c), c.blocks).total);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// CSV. Floating-point columns use the shortest representation that parses
// back to the same double.

inline constexpr const char *kBenchCsvHeader =
    "P,label,params,median_ms,throughput_graphs_per_s,allreduced_elements,efficiency";

namespace detail {
inline std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
template <typename T> T parse_field(const std::string &s, std::size_t line) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ParseError(line, "bad CSV field '" + s + "'");
  return v;
}
} // namespace detail

inline void write_bench_csv(std::ostream &out, const BenchReport &rep) {
  out << kBenchCsvHeader << '\n';
  for (const auto &r : rep.rows)
    out << r.workers << ',' << r.label << ',' << r.params << ','
        << detail::shortest(r.median_ms) << ',' << detail::shortest(r.throughput) << ','
        << r.allreduced_elements << ',' << detail::shortest(r.efficiency) << '\n';
}

inline std::vector<BenchRow> parse_bench_csv(std::istream &in) {
  std::string line;
  std::size_t no = 1;
  if (!std::getline(in, line) || line != kBenchCsvHeader)
    throw ParseError(1, "expected header '" + std::string(kBenchCsvHeader) + "'");
  std::vector<BenchRow> rows;
  while (std::getline(in, line)) {
    ++no;
    if (line.empty())
      continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ','))
      f.push_back(cell);
    if (f.size() != 7)
      throw ParseError(no, "expected 7 columns, got " + std::to_string(f.size()));
    BenchRow r;
    r.workers = detail::parse_field<std::size_t>(f[0], no);
    r.label = f[1];
    r.params = detail::parse_field<std::size_t>(f[2], no);
    r.median_ms = detail::parse_field<double>(f[3], no);
    r.throughput = detail::parse_field<double>(f[4], no);
    r.allreduced_elements = detail::parse_field<std::uint64_t>(f[5], no);
    r.efficiency = detail::parse_field<double>(f[6], no);
    rows.push_back(std::move(r));
  }
  return rows;
}

} // namespace egnpar
