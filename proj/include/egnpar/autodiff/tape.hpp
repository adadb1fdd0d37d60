// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/core/error.hpp"
#include "egnpar/core/matrix.hpp"

#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace egnpar::ad {

/// Handle to a tape node.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

/// Whether a node talks to other workers, and in which direction.
enum class Comm {
  none,
  forward,  // value comes from a collective; replay keeps the recorded value
  backward, // adjoint runs a collective; runs on every backward pass
};

/// Upstream gradient injected at a node when running backward.
struct Seed {
  Var var;
  Matrix grad;
};

/// Linear record of primitive operations, one node per primitive (not per
/// scalar). Each node keeps the closure that produced its value, so the tape
/// can be replayed, and the adjoint that maps its output gradient onto its
/// inputs.
///
/// A tape belongs to one forward/backward pair and is not thread-safe.
class Tape {
public:
  using ForwardFn = std::function<Matrix(const Tape &)>;
  using BackwardFn = std::function<void(Tape &, const Matrix &)>;

  Var leaf(Matrix value, bool requires_grad, std::string label = "leaf") {
    nodes_.push_back(Node{std::move(label), std::move(value), {}, false,
                          requires_grad, Comm::none, nullptr, nullptr});
    return {nodes_.size() - 1};
  }

  /// Record a primitive. `forward` is evaluated immediately to produce the
  /// node value. `backward` is kept only when some input requires a gradient.
  /// Comm::backward nodes run on every backward pass, even when no gradient
  /// reached them, so that all workers issue the same sequence of collectives.
  Var record(std::string op, std::span<const Var> inputs, ForwardFn forward,
             BackwardFn backward, Comm comm = Comm::none) {
    bool needs = false;
    for (Var v : inputs)
      needs = needs || node(v).requires_grad;
    Matrix value = forward(*this);
    nodes_.push_back(Node{std::move(op), std::move(value), {}, false, needs,
                          comm, std::move(forward),
                          needs ? std::move(backward) : nullptr});
    return {nodes_.size() - 1};
  }

  Var record(std::string op, std::initializer_list<Var> inputs, ForwardFn f,
             BackwardFn b, Comm comm = Comm::none) {
    return record(std::move(op), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(f), std::move(b), comm);
  }

  const Matrix &value(Var v) const { return node(v).value; }
  /// Mutable access, for fault-injection tests of replay.
  Matrix &mutable_value(Var v) { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  const std::string &label(Var v) const { return node(v).label; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulated at `v`, or nullptr if none reached it.
  const Matrix *grad(Var v) const {
    const auto &n = node(v);
    return n.has_grad ? &n.grad : nullptr;
  }
  Matrix grad_or_zero(Var v) const {
    const auto &n = node(v);
    return n.has_grad ? n.grad : Matrix(n.value.rows(), n.value.cols());
  }

  /// Zero-initialized gradient buffer of `v`, allocated on first use.
  Matrix &grad_buffer(Var v) {
    auto &n = node(v);
    if (!n.has_grad) {
      n.grad = Matrix(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  void accumulate(Var v, const Matrix &g) {
    if (!node(v).requires_grad)
      return;
    grad_buffer(v) += g;
  }

  /// Reverse sweep. Previous gradients are cleared first.
  void backward(std::span<const Seed> seeds, bool verify_replay_first = false) {
    if (verify_replay_first)
      verify_replay();
    for (auto &n : nodes_) {
      n.has_grad = false;
      n.grad = Matrix();
    }
    for (const auto &s : seeds) {
      node(s.var).value.require_same_shape(s.grad, "backward seed");
      accumulate(s.var, s.grad);
    }
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto &n = nodes_[i];
      if (!n.backward)
        continue;
      if (!n.has_grad && n.comm != Comm::backward)
        continue;
      const Matrix g = grad_or_zero({i});
      n.backward(*this, g);
    }
  }

  void backward(const Seed &seed, bool verify_replay_first = false) {
    backward(std::span<const Seed>(&seed, 1), verify_replay_first);
  }

  /// Re-evaluate every local node from the current leaf values and
  /// require bit-identical results. Throws InternalError on the first
  /// mismatch. Recorded values are left unchanged.
  void verify_replay() {
    std::vector<Matrix> recorded;
    recorded.reserve(nodes_.size());
    for (const auto &n : nodes_)
      recorded.push_back(n.value);
    std::optional<std::string> failure;
    for (std::size_t i = 0; i < nodes_.size() && !failure; ++i) {
      auto &n = nodes_[i];
      if (!n.forward || n.comm == Comm::forward)
        continue;
      n.value = n.forward(*this);
      if (!n.value.bit_equal(recorded[i]))
        failure = "tape replay mismatch at node " + std::to_string(i) + " (" +
                  n.label + ")";
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      nodes_[i].value = std::move(recorded[i]);
    if (failure)
      throw InternalError(*failure);
  }

private:
  struct Node {
    std::string label;
    Matrix value;
    Matrix grad;
    bool has_grad;
    bool requires_grad;
    Comm comm;
    ForwardFn forward;
    BackwardFn backward;
  };

  Node &node(Var v) {
    if (v.id >= nodes_.size())
      throw InternalError("invalid tape variable");
    return nodes_[v.id];
  }
  const Node &node(Var v) const {
    if (v.id >= nodes_.size())
      throw InternalError("invalid tape variable");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

} // namespace egnpar::ad
