// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace egnpar {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text. Carries the 1-based line number of the offending line.
class ParseError : public Error {
public:
  ParseError(std::size_t line, const std::string &what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

/// Shape or configuration mismatch detected at an API boundary.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// A self-check inside the library failed (tape replay, replica divergence).
class InternalError : public Error {
public:
  using Error::Error;
};

/// Raised by collectives: timeouts, shape mismatches, aborted groups.
class CollectiveError : public Error {
public:
  using Error::Error;
};

/// Failure inside one worker of a group, tagged with where it happened.
class WorkerError : public Error {
public:
  WorkerError(std::size_t rank, std::string stage, int block, const std::string &what)
      : Error("worker " + std::to_string(rank) + " failed in stage '" + stage + "'" +
              (block >= 0 ? " of block " + std::to_string(block) : std::string()) +
              ": " + what),
        rank_(rank), stage_(std::move(stage)), block_(block) {}

  std::size_t rank() const noexcept { return rank_; }
  const std::string &stage() const noexcept { return stage_; }
  int block() const noexcept { return block_; }

private:
  std::size_t rank_;
  std::string stage_;
  int block_;
};

/// Non-finite value encountered where a finite one is required.
class NumericError : public Error {
public:
  using Error::Error;
};

} // namespace egnpar
