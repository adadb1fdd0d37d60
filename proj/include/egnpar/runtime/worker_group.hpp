// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/runtime/collective.hpp"

#include <condition_variable>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace egnpar {

/// P persistent worker threads sharing one ThreadCollective. `run` hands the
/// same job to every rank and returns when all ranks are done. If any rank
/// throws, the collective is aborted so the others stop waiting, and the
/// first failure is rethrown on the calling thread.
class WorkerGroup {
public:
  struct Options {
    std::chrono::milliseconds timeout = std::chrono::seconds(30);
    ReductionFault fault = ReductionFault::none;
  };

  explicit WorkerGroup(std::size_t workers) : WorkerGroup(workers, Options{}) {}

  WorkerGroup(std::size_t workers, Options opts) : workers_(workers), opts_(opts) {
    if (workers == 0)
      throw Error("WorkerGroup: worker count must be >= 1");
    reset_collective();
    threads_.reserve(workers);
    for (std::size_t r = 0; r < workers; ++r)
      threads_.emplace_back([this, r] { loop(r); });
  }

  ~WorkerGroup() {
    {
      std::lock_guard lk(mu_);
      stop_ = true;
    }
    start_cv_.notify_all();
    for (auto &t : threads_)
      t.join();
  }

  WorkerGroup(const WorkerGroup &) = delete;
  WorkerGroup &operator=(const WorkerGroup &) = delete;

  std::size_t size() const noexcept { return workers_; }
  Collective &collective() noexcept { return *collective_; }

  /// Not reentrant: one driver at a time.
  void run(const std::function<void(std::size_t rank)> &job) {
    std::unique_lock lk(mu_);
    job_ = &job;
    pending_ = workers_;
    first_error_ = nullptr;
    ++generation_;
    start_cv_.notify_all();
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_ = nullptr;
    if (first_error_) {
      auto err = first_error_;
      first_error_ = nullptr;
      lk.unlock();
      reset_collective();
      std::rethrow_exception(err);
    }
  }

private:
  void reset_collective() {
    collective_ = std::make_unique<ThreadCollective>(workers_, opts_.timeout, opts_.fault);
  }

  void loop(std::size_t rank) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t)> *job = nullptr;
      {
        std::unique_lock lk(mu_);
        start_cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_)
          return;
        seen = generation_;
        job = job_;
      }
      try {
        (*job)(rank);
      } catch (...) {
        bool first = false;
        {
          std::lock_guard lk(mu_);
          if (!first_error_) {
            first_error_ = std::current_exception();
            first = true;
          }
        }
        if (first)
          collective_->abort("worker " + std::to_string(rank) + " failed");
      }
      std::lock_guard lk(mu_);
      if (--pending_ == 0)
        done_cv_.notify_all();
    }
  }

  std::size_t workers_;
  Options opts_;
  std::unique_ptr<ThreadCollective> collective_;
  std::vector<std::thread> threads_;

  std::mutex mu_;
  std::condition_variable start_cv_;
  std::condition_variable done_cv_;
  const std::function<void(std::size_t)> *job_ = nullptr;
  std::size_t pending_ = 0;
  std::uint64_t generation_ = 0;
  std::exception_ptr first_error_;
  bool stop_ = false;
};

} // namespace egnpar
