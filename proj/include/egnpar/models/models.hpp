// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/system.hpp"
#include "egnpar/gradients/gradients.hpp"
#include "egnpar/model/engine.hpp"
#include "egnpar/runtime/parallel.hpp"

#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

namespace egnpar {

struct Prediction {
  double energy = 0.0;
  Matrix forces; // N x 3
};

/// Energy and gradients of one system for a given pair of upstream seeds.
struct Evaluation {
  double energy = 0.0;
  Matrix forces;
  GradientBundle grads;
};

/// Runs the model sequentially when config.workers == 1 and on a private
/// WorkerGroup otherwise. Energy-centric forces come from a backward pass;
/// force-centric forces from the force head.
///
/// Not thread-safe: one driver per evaluator.
class Evaluator {
public:
  Evaluator(const ModelParams &params, ModelConfig config)
      : params_(&params), config_(std::move(config)) {
    config_.validate();
    if (!(params.shape == config_.shape()))
      throw ShapeError("parameters do not match the model configuration");
    if (config_.workers > 1)
      group_ = std::make_unique<WorkerGroup>(config_.workers);
  }

  const ModelConfig &config() const noexcept { return config_; }
  void set_params(const ModelParams &params) {
    if (!(params.shape == config_.shape()))
      throw ShapeError("parameters do not match the model configuration");
    params_ = &params;
  }

  static std::shared_ptr<const GraphTopology> topology_of(const AtomicSystem &system,
                                                         double cutoff) {
    return std::make_shared<const GraphTopology>(build_graph(system, cutoff).topology);
  }

  Prediction predict(const AtomicSystem &system) {
    system.validate();
    return predict(system, topology_of(system, config_.cutoff));
  }

  Prediction predict(const AtomicSystem &system,
                     std::shared_ptr<const GraphTopology> topo) {
    const bool ec = energy_centric(config_.variant);
    auto ev = run(system, std::move(topo), {false, ec}, ec ? std::optional<double>(1.0)
                                                           : std::nullopt,
                  nullptr);
    return {ev.energy, std::move(ev.forces)};
  }

  /// Forward, then backward with dL/dE = energy_seed and, for the
  /// force-centric variant, dL/dF = force_seed. Position gradients are
  /// requested only when `position_grads` is set.
  Evaluation evaluate(const AtomicSystem &system, std::shared_ptr<const GraphTopology> topo,
                      double energy_seed, const Matrix *force_seed, bool position_grads) {
    return run(system, std::move(topo), {true, position_grads}, energy_seed, force_seed);
  }

private:
  Evaluation run(const AtomicSystem &system, std::shared_ptr<const GraphTopology> topo,
                 Program::Options opts, std::optional<double> energy_seed,
                 const Matrix *force_seed) {
    const Matrix pos = system.position_matrix();
    Evaluation ev;
    auto finish = [&](auto &&fwd_energy, auto &&direct, auto &&bwd) {
      ev.energy = fwd_energy();
      if (energy_seed)
        ev.grads = bwd(*energy_seed, force_seed);
      if (energy_centric(config_.variant)) {
        if (opts.position_grads && energy_seed && !force_seed && *energy_seed == 1.0) {
          ev.forces = ev.grads.d_positions;
          for (auto &v : ev.forces.flat())
            v = -v;
        }
      } else {
        ev.forces = direct();
      }
    };
    if (!group_) {
      SequentialEngine eng(*params_, config_, topo, system.atomic_numbers, pos, opts);
      auto &p = eng.program();
      finish([&] { return p.energy(); }, [&] { return p.direct_forces(); },
             [&](double e, const Matrix *f) { return backward(p, e, f); });
    } else {
      ParallelEngine eng(*group_, *params_, config_, topo, system.atomic_numbers, pos, opts);
      finish([&] { return eng.forward().energy; },
             [&] { return *eng.forward().direct_forces; },
             [&](double e, const Matrix *f) { return eng.backward(e, f); });
    }
    if (!std::isfinite(ev.energy) || !ev.forces.all_finite())
      throw NumericError("non-finite energy or forces for system '" + system.id + "'");
    return ev;
  }

  const ModelParams *params_;
  ModelConfig config_;
  std::unique_ptr<WorkerGroup> group_;
};

inline Prediction predict(const AtomicSystem &system, const ModelParams &params,
                          const ModelConfig &config) {
  Evaluator ev(params, config);
  return ev.predict(system);
}

/// Largest per-atom force norm.
inline double max_force_norm(const Matrix &forces) {
  double m = 0.0;
  for (std::size_t i = 0; i < forces.rows(); ++i)
    m = std::max(m, std::hypot(forces(i, 0), forces(i, 1), forces(i, 2)));
  return m;
}

// ---------------------------------------------------------------------------
// Relaxation

struct RelaxOptions {
  std::size_t max_steps = 200;
  double fmax = 0.0; // required, > 0
  double step_size = 0.05;
  /// Energy-centric only: halve the step until the energy does not increase.
  bool halve_on_increase = true;
  double min_step_size = 1e-12;
};

struct RelaxationResult {
  /// Positions before the first step and after every accepted step.
  std::vector<std::vector<Vec3>> trajectory;
  std::vector<double> max_force;
  std::vector<double> energies;
  bool converged = false;
  std::size_t steps = 0;
  /// Set when the step size fell below min_step_size without lowering energy.
  bool step_size_exhausted = false;
};

/// Gradient-descent relaxation x <- x + eta f, rebuilding the graph at every
/// position. Stops when the largest atomic force is below opts.fmax or after
/// opts.max_steps accepted steps.
inline RelaxationResult relax(const AtomicSystem &system, const ModelParams &params,
                              const ModelConfig &config, const RelaxOptions &opts) {
  if (!(opts.fmax > 0.0))
    throw Error("relax: fmax threshold must be positive");
  if (!(opts.step_size > 0.0))
    throw Error("relax: step size must be positive");
  Evaluator ev(params, config);
  const bool halving = opts.halve_on_increase && energy_centric(config.variant);

  AtomicSystem cur = system;
  auto evaluate = [&](const AtomicSystem &s) {
    auto p = ev.predict(s);
    if (!p.forces.all_finite() || !std::isfinite(p.energy))
      throw NumericError("relax: non-finite forces");
    return p;
  };
  RelaxationResult r;
  Prediction pred = evaluate(cur);
  auto record = [&] {
    r.trajectory.push_back(cur.positions);
    r.energies.push_back(pred.energy);
    r.max_force.push_back(max_force_norm(pred.forces));
  };
  record();

  double eta = opts.step_size;
  while (true) {
    if (r.max_force.back() < opts.fmax) {
      r.converged = true;
      break;
    }
    if (r.steps >= opts.max_steps)
      break;
    AtomicSystem next;
    Prediction next_pred;
    for (;;) {
      next = cur;
      for (std::size_t i = 0; i < next.size(); ++i)
        for (int c = 0; c < 3; ++c)
          next.positions[i][c] += eta * pred.forces(i, c);
      next_pred = evaluate(next);
      if (!halving || next_pred.energy <= pred.energy)
        break;
      eta *= 0.5;
      if (eta < opts.min_step_size) {
        r.step_size_exhausted = true;
        return r;
      }
    }
    cur = std::move(next);
    pred = std::move(next_pred);
    ++r.steps;
    record();
  }
  return r;
}

/// Dimer-friendly diagnostic model: E = sum over directed edges of
/// (d - r0)^2, with every block an exact identity.
inline std::pair<ModelConfig, ModelParams> quadratic_fixture(double r0 = 1.5,
                                                             double cutoff = 3.0) {
  ModelConfig c;
  c.variant = Variant::dimenet;
  c.blocks = 1;
  c.d_u = c.d_v = c.d_e = c.d_t = c.d_bil = 1;
  c.k_rbf = 1;
  c.l_sbf = 1;
  c.cutoff = cutoff;
  c.diagnostic = true;
  c.diagnostic_r0 = r0;
  ModelParams p = make_zero_params(c.shape());
  p.edge_init.weight(0, 0) = 1.0;
  p.edge_energy_head.weight(0, 0) = 1.0;
  return {c, p};
}

// ---------------------------------------------------------------------------
// Training

struct Sample {
  AtomicSystem system;
  double energy = 0.0;
  Matrix forces; // N x 3
};

struct TrainOptions {
  double lr = 1e-2;
  std::size_t steps = 100;
  double w_energy = 1.0;
  double w_forces = 1.0;
  /// Displacement used for the force-term derivative of energy-centric models.
  double fd_step = 1e-5;
};

struct TrainResult {
  ModelParams params;
  /// Loss before every step, followed by the loss of the final parameters.
  std::vector<double> loss_history;
};

struct LossAndGrad {
  double loss = 0.0;
  ModelParams grad;
};

/// L = 1/S sum_s [ w_E (E_s - E*_s)^2 + w_F mean_i |F_si - F*_si|^2 ]
///
/// Force-centric models backpropagate through the force head directly. For
/// energy-centric models F = -dE/dx, and the force term needs the mixed
/// derivative -d/dtheta (dE/dx . r) with r = dL/dF; it is taken as a central
/// difference of dE/dtheta along r at fixed topology.
inline LossAndGrad loss_and_grad(const std::vector<Sample> &data, const ModelParams &params,
                                 const ModelConfig &config, const TrainOptions &opts,
                                 bool with_grad = true) {
  if (data.empty())
    throw Error("train: empty dataset");
  Evaluator ev(params, config);
  const double inv_s = 1.0 / static_cast<double>(data.size());
  LossAndGrad out;
  out.grad = params.zeros_like();
  for (const auto &s : data) {
    s.system.validate();
    if (s.forces.rows() != s.system.size() || s.forces.cols() != 3)
      throw ShapeError("train: target forces must be N x 3");
    auto topo = Evaluator::topology_of(s.system, config.cutoff);
    const bool ec = energy_centric(config.variant);
    // Energy-centric: one pass gives E, F and dE/dtheta.
    std::optional<Evaluation> base;
    Prediction pred;
    if (ec && with_grad) {
      base = ev.evaluate(s.system, topo, 1.0, nullptr, true);
      pred = {base->energy, base->forces};
    } else {
      pred = ev.predict(s.system, topo);
    }
    const double n = static_cast<double>(s.system.size());
    const double de = pred.energy - s.energy;
    double fsq = 0.0;
    Matrix r(s.forces.rows(), 3); // dL/dF
    for (std::size_t k = 0; k < r.size(); ++k) {
      const double diff = pred.forces[k] - s.forces[k];
      fsq += diff * diff;
      r[k] = 2.0 * opts.w_forces * diff * inv_s / n;
    }
    out.loss += inv_s * (opts.w_energy * de * de + opts.w_forces * fsq / n);
    if (!with_grad)
      continue;
    const double e_seed = 2.0 * opts.w_energy * de * inv_s;
    if (!ec) {
      out.grad.axpy(1.0, ev.evaluate(s.system, topo, e_seed, &r, false).grads.d_params);
      continue;
    }
    out.grad.axpy(e_seed, base->grads.d_params);
    const double rn = max_abs(r);
    if (rn == 0.0)
      continue;
    const double h = opts.fd_step / rn;
    auto shifted = [&](double sign) {
      AtomicSystem x = s.system;
      for (std::size_t i = 0; i < x.size(); ++i)
        for (int c = 0; c < 3; ++c)
          x.positions[i][c] += sign * h * r(i, c);
      return ev.evaluate(x, topo, 1.0, nullptr, false).grads.d_params;
    };
    const auto plus = shifted(1.0);
    const auto minus = shifted(-1.0);
    out.grad.axpy(-1.0 / (2.0 * h), plus);
    out.grad.axpy(1.0 / (2.0 * h), minus);
  }
  if (!std::isfinite(out.loss))
    throw NumericError("train: non-finite loss");
  return out;
}

/// Full-batch gradient descent.
inline TrainResult train_simple(const std::vector<Sample> &data, const ModelParams &params,
                                const ModelConfig &config, const TrainOptions &opts) {
  TrainResult res{params, {}};
  for (std::size_t step = 0; step < opts.steps; ++step) {
    auto lg = loss_and_grad(data, res.params, config, opts);
    res.loss_history.push_back(lg.loss);
    if (!lg.grad.all_finite())
      throw NumericError("train: non-finite gradient at step " + std::to_string(step));
    if (opts.lr != 0.0)
      res.params.axpy(-opts.lr, lg.grad);
  }
  res.loss_history.push_back(loss_and_grad(data, res.params, config, opts, false).loss);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: the binary parameter container at `path` plus the JSON
// configuration at `path + ".json"`.

inline void save_checkpoint(const ModelParams &params, const ModelConfig &config,
                            const std::string &path) {
  if (!(params.shape == config.shape()))
    throw ShapeError("checkpoint: parameters do not match the configuration");
  save_params(params, path);
  save_config(config, path + ".json");
}

inline std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string &path) {
  auto config = load_config(path + ".json");
  auto params = load_params(path);
  if (!(params.shape == config.shape()))
    throw ShapeError("checkpoint: parameter header does not match '" + path + ".json'");
  return {std::move(config), std::move(params)};
}

} // namespace egnpar
