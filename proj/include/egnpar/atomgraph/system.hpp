// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/elements.hpp"
#include "egnpar/core/error.hpp"
#include "egnpar/core/matrix.hpp"
#include "egnpar/core/vec3.hpp"

#include <charconv>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace egnpar {

/// Minimum separation below which two atoms count as coincident.
inline constexpr double kCoincidentDistance = 1e-12;

/// Positions and atomic numbers of an open-boundary atomic system.
struct AtomicSystem {
  std::vector<Vec3> positions;
  std::vector<int> atomic_numbers;
  std::string id;

  std::size_t size() const noexcept { return positions.size(); }

  /// Throws Error if any invariant is violated.
  void validate() const {
    if (positions.empty())
      throw Error("AtomicSystem: no atoms");
    if (positions.size() != atomic_numbers.size())
      throw Error("AtomicSystem: positions/atomic_numbers length mismatch");
    for (int z : atomic_numbers)
      if (z < 1)
        throw Error("AtomicSystem: atomic number must be >= 1");
    for (std::size_t i = 0; i < size(); ++i)
      for (std::size_t j = i + 1; j < size(); ++j)
        if (norm(positions[i] - positions[j]) <= kCoincidentDistance)
          throw Error("AtomicSystem: atoms " + std::to_string(i) + " and " +
                      std::to_string(j) + " coincide");
  }

  /// n x 3 position matrix.
  Matrix position_matrix() const {
    Matrix m(size(), 3);
    for (std::size_t i = 0; i < size(); ++i)
      for (int c = 0; c < 3; ++c)
        m(i, c) = positions[i][c];
    return m;
  }

  void set_positions(const Matrix &m) {
    if (m.rows() != size() || m.cols() != 3)
      throw ShapeError("AtomicSystem::set_positions: expected " +
                       std::to_string(size()) + "x3, got " + m.shape_string());
    for (std::size_t i = 0; i < size(); ++i)
      positions[i] = {m(i, 0), m(i, 1), m(i, 2)};
  }
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t'))
      ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t')
      ++j;
    if (j > i)
      out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline bool parse_double(std::string_view tok, double &out) {
  if (!tok.empty() && tok.front() == '+')
    tok.remove_prefix(1);
  const auto *end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

} // namespace detail

/// Parse a single-frame XYZ file: atom count, comment line, then one
/// "SYMBOL x y z" line per atom. Trailing blank lines are accepted.
inline AtomicSystem parse_xyz(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos)
      nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r')
      line.remove_suffix(1);
    lines.push_back(line);
    start = nl + 1;
  }

  if (lines.empty() || detail::split_ws(lines[0]).size() != 1)
    throw ParseError(1, "expected a single atom count");
  const auto count_tok = detail::split_ws(lines[0])[0];
  long long n = 0;
  {
    auto [ptr, ec] = std::from_chars(count_tok.data(),
                                     count_tok.data() + count_tok.size(), n);
    if (ec != std::errc() || ptr != count_tok.data() + count_tok.size() ||
        n < 1)
      throw ParseError(1, "malformed atom count '" + std::string(count_tok) +
                              "'");
  }
  const auto count = static_cast<std::size_t>(n);
  if (lines.size() < count + 2)
    throw ParseError(lines.size(), "expected " + std::to_string(count) +
                                       " atom lines, file ends early");

  AtomicSystem sys;
  sys.id = std::string(lines[1]);
  sys.positions.reserve(count);
  sys.atomic_numbers.reserve(count);
  for (std::size_t a = 0; a < count; ++a) {
    const std::size_t lineno = a + 3;
    const auto toks = detail::split_ws(lines[a + 2]);
    if (toks.size() != 4)
      throw ParseError(lineno, "expected 'SYMBOL x y z'");
    const auto z = atomic_number(toks[0]);
    if (!z)
      throw ParseError(lineno, "unknown element symbol '" +
                                   std::string(toks[0]) + "'");
    Vec3 p{};
    for (int c = 0; c < 3; ++c)
      if (!detail::parse_double(toks[c + 1], p[c]))
        throw ParseError(lineno, "non-numeric coordinate '" +
                                     std::string(toks[c + 1]) + "'");
    for (std::size_t b = 0; b < a; ++b)
      if (norm(sys.positions[b] - p) <= kCoincidentDistance)
        throw ParseError(lineno, "duplicate position (coincides with atom " +
                                     std::to_string(b + 1) + ")");
    sys.positions.push_back(p);
    sys.atomic_numbers.push_back(*z);
  }
  for (std::size_t l = count + 2; l < lines.size(); ++l)
    if (!detail::split_ws(lines[l]).empty())
      throw ParseError(l + 1, "unexpected content after the last atom");
  return sys;
}

/// Inverse of parse_xyz. Coordinates use the shortest round-trip form.
inline std::string format_xyz(const AtomicSystem &sys) {
  std::ostringstream os;
  os << sys.size() << '\n' << sys.id << '\n';
  for (std::size_t i = 0; i < sys.size(); ++i) {
    os << element_symbol(sys.atomic_numbers[i]);
    for (int c = 0; c < 3; ++c)
      os << ' ' << detail::format_double(sys.positions[i][c]);
    os << '\n';
  }
  return os.str();
}

} // namespace egnpar
