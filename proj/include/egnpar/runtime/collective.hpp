// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/core/error.hpp"
#include "egnpar/core/matrix.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

namespace egnpar {

/// Which buffer a collective carries. `triplet` exists only so that an
/// attempt to communicate a triplet buffer can be named and refused.
enum class Level { triplet, edge, node, global, parameter };
enum class Phase { forward, backward };

inline const char *to_string(Level l) {
  switch (l) {
  case Level::triplet: return "triplet";
  case Level::edge: return "edge";
  case Level::node: return "node";
  case Level::global: return "global";
  case Level::parameter: return "parameter";
  }
  return "?";
}
inline const char *to_string(Phase p) {
  return p == Phase::forward ? "forward" : "backward";
}

struct CollectiveTag {
  Level level = Level::edge;
  Phase phase = Phase::forward;
  int block = -1;
  std::string stage;
};

/// One completed all-reduce.
struct CollectiveEvent {
  CollectiveTag tag;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t elements() const noexcept { return rows * cols; }
};

/// Element totals derived from a list of events.
struct CommCounters {
  std::vector<CollectiveEvent> events;

  std::uint64_t elements(Phase phase) const {
    std::uint64_t n = 0;
    for (const auto &e : events)
      if (e.tag.phase == phase)
        n += e.elements();
    return n;
  }
  std::uint64_t elements(Phase phase, Level level) const {
    std::uint64_t n = 0;
    for (const auto &e : events)
      if (e.tag.phase == phase && e.tag.level == level)
        n += e.elements();
    return n;
  }
  std::uint64_t elements(Phase phase, int block) const {
    std::uint64_t n = 0;
    for (const auto &e : events)
      if (e.tag.phase == phase && e.tag.block == block)
        n += e.elements();
    return n;
  }
};

/// Group-communication endpoint. allreduce_sum delivers the same rank-ordered
/// sum buffer_0 + buffer_1 + ... to every participant.
class Collective {
public:
  virtual ~Collective() = default;
  virtual std::size_t world_size() const = 0;
  virtual Matrix allreduce_sum(std::size_t rank, const Matrix &local,
                               const CollectiveTag &tag) = 0;
  virtual void barrier(std::size_t rank) = 0;
  /// Wake every waiting participant with an error. Idempotent.
  virtual void abort(const std::string &reason) = 0;

  /// Snapshot of the events so far. Call only while no collective is running.
  const CommCounters &counters() const noexcept { return counters_; }
  void reset_counters() { counters_.events.clear(); }

protected:
  static void refuse_triplets(const CollectiveTag &tag) {
    if (tag.level == Level::triplet)
      throw CollectiveError("triplet buffers are never communicated (stage '" +
                            tag.stage + "')");
  }

  CommCounters counters_;
};

/// Single participant. The sum is the input itself.
class LocalCollective final : public Collective {
public:
  std::size_t world_size() const override { return 1; }

  Matrix allreduce_sum(std::size_t rank, const Matrix &local,
                       const CollectiveTag &tag) override {
    if (rank != 0)
      throw CollectiveError("LocalCollective: rank must be 0");
    refuse_triplets(tag);
    counters_.events.push_back({tag, local.rows(), local.cols()});
    return local;
  }
  void barrier(std::size_t) override {}
  void abort(const std::string &) override {}
};

/// Test hook that deliberately breaks the reduction.
enum class ReductionFault {
  none,
  skip_last_rank, // the rank loop stops one short
};

/// P participants on P threads of one process. Every call is a rendezvous of
/// all P ranks; the last rank to arrive reduces in ascending rank order and
/// publishes the result. Waiting longer than `timeout` aborts the group.
class ThreadCollective final : public Collective {
public:
  explicit ThreadCollective(std::size_t world,
                            std::chrono::milliseconds timeout = std::chrono::seconds(30),
                            ReductionFault fault = ReductionFault::none)
      : world_(world), timeout_(timeout), fault_(fault), slots_(world),
        slot_tags_(world) {
    if (world == 0)
      throw CollectiveError("ThreadCollective: world size must be >= 1");
  }

  std::size_t world_size() const override { return world_; }

  Matrix allreduce_sum(std::size_t rank, const Matrix &local,
                       const CollectiveTag &tag) override {
    check_rank(rank);
    refuse_triplets(tag);
    std::unique_lock lk(mu_);
    throw_if_aborted();
    const auto gen = generation_;
    slots_[rank] = local;
    slot_tags_[rank] = tag;
    if (++arrived_ == world_) {
      reduce_locked();
      return result_;
    }
    wait_locked(lk, gen, "allreduce", tag.stage);
    return result_;
  }

  void barrier(std::size_t rank) override {
    check_rank(rank);
    std::unique_lock lk(mu_);
    throw_if_aborted();
    const auto gen = generation_;
    slot_tags_[rank] = CollectiveTag{Level::global, Phase::forward, -1, "barrier"};
    slots_[rank] = Matrix();
    if (++arrived_ == world_) {
      arrived_ = 0;
      ++generation_;
      cv_.notify_all();
      return;
    }
    wait_locked(lk, gen, "barrier", "barrier");
  }

  void abort(const std::string &reason) override {
    std::lock_guard lk(mu_);
    abort_locked(reason);
  }

  bool aborted() const {
    std::lock_guard lk(mu_);
    return aborted_;
  }

private:
  void check_rank(std::size_t rank) const {
    if (rank >= world_)
      throw CollectiveError("rank " + std::to_string(rank) +
                            " out of range for world size " +
                            std::to_string(world_));
  }

  void throw_if_aborted() const {
    if (aborted_)
      throw CollectiveError("collective aborted: " + abort_reason_);
  }

  void abort_locked(const std::string &reason) {
    if (!aborted_) {
      aborted_ = true;
      abort_reason_ = reason;
    }
    cv_.notify_all();
  }

  void reduce_locked() {
    const Matrix &first = slots_[0];
    for (std::size_t p = 1; p < world_; ++p)
      if (!slots_[p].same_shape(first) ||
          slot_tags_[p].level != slot_tags_[0].level) {
        std::ostringstream os;
        os << "allreduce shape mismatch in stage '" << slot_tags_[0].stage
           << "': rank 0 sent " << first.shape_string() << " ("
           << to_string(slot_tags_[0].level) << "), rank " << p << " sent "
           << slots_[p].shape_string() << " (" << to_string(slot_tags_[p].level)
           << ")";
        abort_locked(os.str());
        throw CollectiveError(os.str());
      }
    const std::size_t last =
        fault_ == ReductionFault::skip_last_rank && world_ > 1 ? world_ - 1
                                                               : world_;
    result_ = first;
    for (std::size_t p = 1; p < last; ++p)
      result_ += slots_[p];
    counters_.events.push_back({slot_tags_[0], first.rows(), first.cols()});
    arrived_ = 0;
    ++generation_;
    cv_.notify_all();
  }

  void wait_locked(std::unique_lock<std::mutex> &lk, std::uint64_t gen,
                   const char *what, const std::string &stage) {
    const bool done = cv_.wait_for(lk, timeout_, [&] {
      return generation_ != gen || aborted_;
    });
    if (!done) {
      std::ostringstream os;
      os << what << " timed out after " << timeout_.count()
         << " ms in stage '" << stage << "' (" << arrived_ << " of " << world_
         << " ranks arrived)";
      abort_locked(os.str());
      throw CollectiveError(os.str());
    }
    if (generation_ == gen)
      throw_if_aborted();
  }

  std::size_t world_;
  std::chrono::milliseconds timeout_;
  ReductionFault fault_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<Matrix> slots_;
  std::vector<CollectiveTag> slot_tags_;
  std::size_t arrived_ = 0;
  std::uint64_t generation_ = 0;
  Matrix result_;
  bool aborted_ = false;
  std::string abort_reason_;
};

} // namespace egnpar
