// SPDX-License-Identifier: Apache-2.0
// egnpar command-line tool: gen, run, verify, relax, train, bench.

#include "egnpar/bench/fixtures.hpp"
#include "egnpar/bench/generate.hpp"
#include "egnpar/bench/verify.hpp"
#include "egnpar/bench/weak_scaling.hpp"
#include "egnpar/models/models.hpp"
#include "egnpar/runtime/instrumentation.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

using namespace egnpar;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> workers;
  std::string out;
};

std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to --out if given, else stdout.
void emit(const Globals &g, const std::string &text) {
  if (g.out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(g.out, std::ios::binary);
  if (!out)
    throw Error("cannot write '" + g.out + "'");
  out << text;
}

ModelConfig resolve_config(const Globals &g) {
  ModelConfig c = g.config_path.empty() ? ModelConfig{} : load_config(g.config_path);
  if (g.seed)
    c.seed = *g.seed;
  if (g.workers)
    c.workers = *g.workers;
  c.validate();
  return c;
}

/// Parameters from a checkpoint if given (its config wins over --config),
/// else freshly initialized from the config seed.
std::pair<ModelConfig, ModelParams> resolve_model(const Globals &g,
                                                  const std::string &checkpoint) {
  if (checkpoint.empty()) {
    auto c = resolve_config(g);
    return {c, init_params(c)};
  }
  auto [c, p] = load_checkpoint(checkpoint);
  if (g.workers)
    c.workers = *g.workers;
  return {c, std::move(p)};
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Graph-parallel extended graph network engine"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON model configuration");
  app.add_option("--seed", g.seed, "Random seed (overrides the config seed)");
  app.add_option("--workers", g.workers, "Number of simulated workers P")
      ->check(CLI::Range(1u, 1024u));
  app.add_option("--out", g.out, "Output path (default: stdout)");

  // gen
  auto *gen = app.add_subcommand("gen", "Write a random atom cloud as XYZ");
  std::size_t gen_atoms = 16;
  double gen_density = 0.5;
  gen->add_option("-n,--atoms", gen_atoms, "Number of atoms")->check(CLI::PositiveNumber);
  gen->add_option("--density", gen_density, "Atoms per unit volume");

  // run
  auto *run = app.add_subcommand("run", "Predict energy and forces for an XYZ file");
  std::string run_xyz, run_ckpt;
  run->add_option("xyz", run_xyz, "Input XYZ file")->required();
  run->add_option("--params", run_ckpt, "Checkpoint (parameters; config read from <path>.json)");

  // verify
  auto *verify = app.add_subcommand("verify", "Run the invariant suite; exit 0 iff all pass");
  std::vector<std::uint64_t> v_seeds = {0, 1, 2};
  std::vector<std::size_t> v_plist = {1, 2, 3, 4};
  std::size_t v_atoms = 12;
  bool v_fault = false;
  verify->add_option("--seeds", v_seeds, "Seeds")->delimiter(',');
  verify->add_option("--p-list", v_plist, "Worker counts")->delimiter(',');
  verify->add_option("-n,--atoms", v_atoms, "Atoms per random system");
  verify->add_flag("--inject-reduction-fault", v_fault,
                   "Drop the last rank from every reduction (test hook)");

  // relax
  auto *rel = app.add_subcommand("relax", "Relax an XYZ structure with predicted forces");
  std::string rel_xyz, rel_ckpt;
  RelaxOptions rel_opts;
  bool rel_quadratic = false;
  rel->add_option("xyz", rel_xyz, "Input XYZ file")->required();
  rel->add_option("--params", rel_ckpt, "Checkpoint");
  rel->add_option("--fmax", rel_opts.fmax, "Force convergence threshold")->required();
  rel->add_option("--max-steps", rel_opts.max_steps, "Step cap");
  rel->add_option("--step", rel_opts.step_size, "Initial step size");
  rel->add_flag("--quadratic", rel_quadratic,
                "Use the diagnostic model E = sum over edges (d - 1.5)^2");

  // train
  auto *tr = app.add_subcommand("train", "Full-batch gradient descent on a toy data set");
  std::string tr_data;
  TrainOptions tr_opts;
  tr_opts.steps = 200;
  std::size_t tr_samples = 5;
  tr->add_option("--data", tr_data,
                 "JSON data set {\"samples\":[{\"xyz\":path,\"energy\":E,\"forces\":[[fx,fy,fz],...]}]}; "
                 "default: a generated toy set");
  tr->add_option("--steps", tr_opts.steps, "Gradient steps");
  tr->add_option("--lr", tr_opts.lr, "Learning rate");
  tr->add_option("--w-energy", tr_opts.w_energy, "Energy loss weight");
  tr->add_option("--w-forces", tr_opts.w_forces, "Force loss weight");
  tr->add_option("--samples", tr_samples, "Samples in the generated toy set");

  // bench
  auto *bench = app.add_subcommand("bench", "Weak-scaling benchmark, CSV output");
  BenchOptions b_opts = default_bench_options();
  std::string b_trace;
  bench->add_option("--p-list", b_opts.workers, "Worker counts, ascending from 1")
      ->delimiter(',');
  bench->add_option("-n,--atoms", b_opts.atoms, "Atoms in the benchmark system");
  bench->add_option("--iterations", b_opts.iterations, "Timed iterations");
  bench->add_option("--warmup", b_opts.warmup, "Warmup iterations");
  bench->add_option("--trace", b_trace,
                    "Directory for per-stage timing and collective CSVs of the largest P");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      GenOptions o;
      o.atoms = gen_atoms;
      o.density = gen_density;
      o.seed = g.seed.value_or(0);
      emit(g, format_xyz(generate_system(o)));
      return 0;
    }

    if (*run) {
      const AtomicSystem sys = parse_xyz(read_file(run_xyz));
      auto [c, p] = resolve_model(g, run_ckpt);
      const auto pred = predict(sys, p, c);
      std::ostringstream os;
      os << "energy " << fmt(pred.energy) << '\n';
      for (std::size_t i = 0; i < sys.size(); ++i)
        os << element_symbol(sys.atomic_numbers[i]) << ' ' << fmt(pred.forces(i, 0)) << ' '
           << fmt(pred.forces(i, 1)) << ' ' << fmt(pred.forces(i, 2)) << '\n';
      emit(g, os.str());
      return 0;
    }

    if (*verify) {
      VerifyOptions o;
      o.config = resolve_config(g);
      o.seeds = v_seeds;
      o.workers = v_plist;
      o.atoms = v_atoms;
      if (v_fault)
        o.fault = ReductionFault::skip_last_rank;
      const auto rep = run_verify(o);
      emit(g, rep.to_json().dump(2) + "\n");
      if (!rep.passed()) {
        for (const auto &name : rep.failed())
          std::cerr << "FAILED: " << name << '\n';
        return 1;
      }
      return 0;
    }

    if (*rel) {
      const AtomicSystem sys = parse_xyz(read_file(rel_xyz));
      ModelConfig c;
      ModelParams p;
      if (rel_quadratic) {
        std::tie(c, p) = quadratic_fixture();
      } else {
        std::tie(c, p) = resolve_model(g, rel_ckpt);
      }
      const auto r = relax(sys, p, c, rel_opts);
      for (std::size_t s = 0; s < r.energies.size(); ++s)
        std::cerr << "step " << s << " energy " << fmt(r.energies[s]) << " fmax "
                  << fmt(r.max_force[s]) << '\n';
      std::cerr << (r.converged ? "converged" : "not converged") << " after " << r.steps
                << " steps\n";
      AtomicSystem last = sys;
      last.positions = r.trajectory.back();
      emit(g, format_xyz(last));
      return r.converged ? 0 : 2;
    }

    if (*tr) {
      auto c = resolve_config(g);
      std::vector<Sample> data;
      if (tr_data.empty()) {
        data = toy_dataset(c, tr_samples, c.seed + 1);
      } else {
        const auto j = nlohmann::json::parse(read_file(tr_data));
        const auto base = std::filesystem::path(tr_data).parent_path();
        for (const auto &s : j.at("samples")) {
          Sample smp;
          smp.system = parse_xyz(read_file((base / s.at("xyz").get<std::string>()).string()));
          smp.energy = s.at("energy").get<double>();
          const auto f = s.at("forces").get<std::vector<std::vector<double>>>();
          smp.forces = Matrix(f.size(), 3);
          for (std::size_t i = 0; i < f.size(); ++i) {
            if (f[i].size() != 3)
              throw Error("train data: force rows need 3 components");
            for (int k = 0; k < 3; ++k)
              smp.forces(i, k) = f[i][k];
          }
          data.push_back(std::move(smp));
        }
      }
      const auto res = train_simple(data, init_params(c), c, tr_opts);
      for (std::size_t s = 0; s < res.loss_history.size(); ++s)
        std::cerr << "step " << s << " loss " << fmt(res.loss_history[s]) << '\n';
      if (!g.out.empty())
        save_checkpoint(res.params, c, g.out);
      std::cout << "initial_loss " << fmt(res.loss_history.front()) << "\nfinal_loss "
                << fmt(res.loss_history.back()) << '\n';
      return 0;
    }

    if (*bench) {
      if (!g.config_path.empty())
        b_opts.base = resolve_config(g);
      if (g.seed)
        b_opts.base.seed = *g.seed;
      const auto rep = run_weak_scaling(b_opts);
      std::ostringstream os;
      write_bench_csv(os, rep);
      emit(g, os.str());
      for (std::size_t i = 0; i < rep.rows.size(); ++i)
        if (rep.rows[i].allreduced_elements != rep.predicted_elements[i])
          std::cerr << "warning: P=" << rep.rows[i].workers << " measured "
                    << rep.rows[i].allreduced_elements << " all-reduced elements, predicted "
                    << rep.predicted_elements[i] << '\n';
      if (!b_trace.empty()) {
        std::filesystem::create_directories(b_trace);
        const std::size_t p = b_opts.workers.back();
        const ModelConfig c = scaled_config(b_opts.base, p);
        const ModelParams params = init_params(c);
        const AtomicSystem sys = generate_system(b_opts.atoms, 0.5, b_opts.system_seed);
        WorkerGroup group(p);
        ParallelEngine eng(group, params, c, Evaluator::topology_of(sys, c.cutoff),
                           sys.atomic_numbers, sys.position_matrix(),
                           {true, energy_centric(c.variant)}, true);
        (void)eng.backward(1.0);
        std::ofstream tf(std::filesystem::path(b_trace) / "stage_timings.csv");
        write_timing_csv(tf, eng.timings());
        std::ofstream cf(std::filesystem::path(b_trace) / "collectives.csv");
        write_collective_csv(cf, eng.forward().counters);
      }
      return 0;
    }
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
