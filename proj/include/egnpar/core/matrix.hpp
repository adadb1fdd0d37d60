// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/core/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace egnpar {

/// Dense row-major matrix of doubles. Every feature buffer, weight and
/// gradient in the library is one of these.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw ShapeError("Matrix: data size does not match shape");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto &r : rows) {
      if (r.size() != cols_)
        throw ShapeError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double &operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }
  double &operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> row(std::size_t r) noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }
  double *data() noexcept { return data_.data(); }
  const double *data() const noexcept { return data_.data(); }

  bool same_shape(const Matrix &o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Matrix &operator+=(const Matrix &o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i)
      data_[i] += o.data_[i];
    return *this;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  /// Bitwise equality, distinguishing -0.0 from 0.0 and comparing NaN payloads.
  bool bit_equal(const Matrix &o) const noexcept {
    return same_shape(o) &&
           (data_.empty() ||
            std::memcmp(data_.data(), o.data_.data(),
                        data_.size() * sizeof(double)) == 0);
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  void require_same_shape(const Matrix &o, const char *op) const {
    if (!same_shape(o))
      throw ShapeError(std::string("Matrix ") + op + ": shape " +
                       shape_string() + " vs " + o.shape_string());
  }

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// max |a - b| / max(max |b|, floor). Relative error in the infinity norm.
inline double max_rel_error(const Matrix &a, const Matrix &b,
                            double floor = 1e-300) {
  a.require_same_shape(b, "max_rel_error");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  if (diff == 0.0)
    return 0.0;
  return diff / std::max(scale, floor);
}

inline double max_abs(const Matrix &a) {
  double m = 0.0;
  for (double v : a.flat())
    m = std::max(m, std::abs(v));
  return m;
}

/// FNV-1a over the raw bytes; used for replica consistency checks.
inline std::uint64_t checksum(const Matrix &m) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto *bytes = reinterpret_cast<const unsigned char *>(m.data());
  for (std::size_t i = 0; i < m.size() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  h ^= m.rows() * 0x9E3779B97F4A7C15ULL + m.cols();
  return h;
}

} // namespace egnpar
