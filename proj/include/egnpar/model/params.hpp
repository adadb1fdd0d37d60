// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/elements.hpp"
#include "egnpar/core/matrix.hpp"
#include "egnpar/core/rng.hpp"
#include "egnpar/model/config.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace egnpar {

/// Y = X W + b. An empty bias means the map has none.
struct Linear {
  Matrix weight; // in x out
  Matrix bias;   // 1 x out, or empty

  bool has_bias() const noexcept { return !bias.empty(); }
};

/// Two layers, SiLU in between: out(silu(hidden(x))). Hidden width equals
/// output width.
struct Mlp {
  Linear hidden;
  Linear out;
};

/// Weights of one EGN block. Fields marked (gemnet) are empty for dimenet.
struct BlockParams {
  Linear tu_down;   // D_e -> D_t, applied to the incoming message m_kj
  Linear tu_rbf;    // K -> D_t, gate from the out-edge RBF
  Linear tu_sbf;    // K*L -> D_t, gate from the triplet SBF
  Linear tu_up;     // D_t -> D_e
  Linear bil_left;  // (gemnet) D_t -> D_bil
  Linear bil_right; // (gemnet) D_t -> D_bil
  Linear bil_out;   // (gemnet) D_bil -> D_t
  Mlp eu;           // [m | agg] 2 D_e -> D_e
  Mlp nu;           // [v | h] D_v + D_e -> D_v
  Linear pool;      // D_v -> D_u, no bias
  Mlp gu;           // D_u -> D_u
  Mlp eu2;          // (gemnet) [m' | v'_recv] D_e + D_v -> D_e
  Linear sym;       // (gemnet) D_e -> D_e, no bias
};

/// All weights of a model. The same type stores parameter gradients.
struct ModelParams {
  ParamShape shape;
  Matrix atom_embedding; // 118 x D_v, row z - 1
  Linear edge_init;      // K -> D_e
  std::vector<BlockParams> blocks;
  Linear energy_head;      // D_u -> 1
  Linear force_head;       // (gemnet) D_e -> 1
  Linear edge_energy_head; // D_e -> 1, used only by the diagnostic readout

  /// Visit every tensor in declaration order, which is also the
  /// serialization order. fn(name, matrix, fan_in).
  template <typename Self, typename Fn>
  static void visit(Self &self, Fn &&fn) {
    const bool gem = self.shape.variant == Variant::gemnet;
    auto lin = [&](const std::string &name, auto &l) {
      const auto fan_in = l.weight.rows();
      fn(name + ".weight", l.weight, fan_in);
      if (l.has_bias())
        fn(name + ".bias", l.bias, fan_in);
    };
    auto mlp = [&](const std::string &name, auto &m) {
      lin(name + ".hidden", m.hidden);
      lin(name + ".out", m.out);
    };
    fn(std::string("atom_embedding"), self.atom_embedding, std::size_t{1});
    lin("edge_init", self.edge_init);
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      auto &bp = self.blocks[b];
      const std::string p = "block" + std::to_string(b) + ".";
      lin(p + "tu_down", bp.tu_down);
      lin(p + "tu_rbf", bp.tu_rbf);
      lin(p + "tu_sbf", bp.tu_sbf);
      lin(p + "tu_up", bp.tu_up);
      if (gem) {
        lin(p + "bil_left", bp.bil_left);
        lin(p + "bil_right", bp.bil_right);
        lin(p + "bil_out", bp.bil_out);
      }
      mlp(p + "eu", bp.eu);
      mlp(p + "nu", bp.nu);
      lin(p + "pool", bp.pool);
      mlp(p + "gu", bp.gu);
      if (gem) {
        mlp(p + "eu2", bp.eu2);
        lin(p + "sym", bp.sym);
      }
    }
    lin("energy_head", self.energy_head);
    if (gem)
      lin("force_head", self.force_head);
    lin("edge_energy_head", self.edge_energy_head);
  }

  template <typename Fn> void for_each(Fn &&fn) {
    visit(*this, [&](const std::string &n, Matrix &m, std::size_t f) {
      fn(n, m, f);
    });
  }
  template <typename Fn> void for_each(Fn &&fn) const {
    visit(*this, [&](const std::string &n, const Matrix &m, std::size_t f) {
      fn(n, m, f);
    });
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const std::string &, const Matrix &m, std::size_t) {
      n += m.size();
    });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const std::string &, const Matrix &m, std::size_t) {
      ok = ok && m.all_finite();
    });
    return ok;
  }

  /// Same shape with every entry zero.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.for_each([](const std::string &, Matrix &m, std::size_t) { m.fill(0.0); });
    return z;
  }

  /// this += scale * other
  void axpy(double scale, const ModelParams &other) {
    std::vector<const Matrix *> src;
    other.for_each([&](const std::string &, const Matrix &m, std::size_t) {
      src.push_back(&m);
    });
    std::size_t i = 0;
    for_each([&](const std::string &name, Matrix &m, std::size_t) {
      m.require_same_shape(*src.at(i), name.c_str());
      for (std::size_t k = 0; k < m.size(); ++k)
        m[k] += scale * (*src[i])[k];
      ++i;
    });
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(count());
    for_each([&](const std::string &, const Matrix &m, std::size_t) {
      out.insert(out.end(), m.flat().begin(), m.flat().end());
    });
    return out;
  }

  bool bit_equal(const ModelParams &o) const {
    if (!(shape == o.shape))
      return false;
    std::vector<const Matrix *> a, b;
    for_each([&](const std::string &, const Matrix &m, std::size_t) { a.push_back(&m); });
    o.for_each([&](const std::string &, const Matrix &m, std::size_t) { b.push_back(&m); });
    if (a.size() != b.size())
      return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!a[i]->bit_equal(*b[i]))
        return false;
    return true;
  }
};

namespace detail {
inline Linear make_linear(std::size_t in, std::size_t out, bool bias) {
  return {Matrix(in, out), bias ? Matrix(1, out) : Matrix()};
}
inline Mlp make_mlp(std::size_t in, std::size_t out) {
  return {make_linear(in, out, true), make_linear(out, out, true)};
}
} // namespace detail

/// Zero-valued parameters with the layout implied by `shape`.
inline ModelParams make_zero_params(const ParamShape &s) {
  using detail::make_linear;
  using detail::make_mlp;
  const bool gem = s.variant == Variant::gemnet;
  ModelParams p;
  p.shape = s;
  p.atom_embedding = Matrix(kNumElements, s.d_v);
  p.edge_init = make_linear(s.k_rbf, s.d_e, true);
  for (std::uint32_t b = 0; b < s.blocks; ++b) {
    BlockParams bp;
    bp.tu_down = make_linear(s.d_e, s.d_t, true);
    bp.tu_rbf = make_linear(s.k_rbf, s.d_t, false);
    bp.tu_sbf = make_linear(std::size_t{s.k_rbf} * s.l_sbf, s.d_t, false);
    bp.tu_up = make_linear(s.d_t, s.d_e, true);
    if (gem) {
      bp.bil_left = make_linear(s.d_t, s.d_bil, false);
      bp.bil_right = make_linear(s.d_t, s.d_bil, false);
      bp.bil_out = make_linear(s.d_bil, s.d_t, true);
    }
    bp.eu = make_mlp(2 * s.d_e, s.d_e);
    bp.nu = make_mlp(s.d_v + s.d_e, s.d_v);
    bp.pool = make_linear(s.d_v, s.d_u, false);
    bp.gu = make_mlp(s.d_u, s.d_u);
    if (gem) {
      bp.eu2 = make_mlp(s.d_e + s.d_v, s.d_e);
      bp.sym = make_linear(s.d_e, s.d_e, false);
    }
    p.blocks.push_back(std::move(bp));
  }
  p.energy_head = make_linear(s.d_u, 1, true);
  if (gem)
    p.force_head = make_linear(s.d_e, 1, true);
  p.edge_energy_head = make_linear(s.d_e, 1, true);
  return p;
}

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]. Each tensor draws from its
/// own split of the seeded stream.
inline ModelParams init_params(const ParamShape &s, std::uint64_t seed) {
  ModelParams p = make_zero_params(s);
  SplitMix64 root(seed);
  p.for_each([&](const std::string &, Matrix &m, std::size_t fan_in) {
    SplitMix64 stream = root.split();
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto &v : m.flat())
      v = stream.uniform(-bound, bound);
  });
  return p;
}

inline ModelParams init_params(const ModelConfig &c) {
  return init_params(c.shape(), c.seed);
}

// ---------------------------------------------------------------------------
// Binary container: "EGN1", nine little-endian u32 (B, D_u, D_v, D_e, D_t,
// D_bil, K_rbf, L_sbf, variant), then every tensor as little-endian f64 in
// visit order. Shapes are implied by the header.

namespace detail {
inline void put_u32(std::string &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::string &out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32(const std::string &in, std::size_t &pos) {
  if (pos + 4 > in.size())
    throw Error("params container truncated in header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= std::uint32_t(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}
inline double get_f64(const std::string &in, std::size_t &pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= std::uint64_t(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return std::bit_cast<double>(v);
}
} // namespace detail

inline std::string serialize_params(const ModelParams &p) {
  std::string out = "EGN1";
  const auto &s = p.shape;
  for (std::uint32_t v : {s.blocks, s.d_u, s.d_v, s.d_e, s.d_t, s.d_bil,
                          s.k_rbf, s.l_sbf, static_cast<std::uint32_t>(s.variant)})
    detail::put_u32(out, v);
  p.for_each([&](const std::string &, const Matrix &m, std::size_t) {
    for (double v : m.flat())
      detail::put_f64(out, v);
  });
  return out;
}

inline ModelParams deserialize_params(const std::string &bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "EGN1") != 0)
    throw Error("params container: bad magic");
  std::size_t pos = 4;
  ParamShape s;
  s.blocks = detail::get_u32(bytes, pos);
  s.d_u = detail::get_u32(bytes, pos);
  s.d_v = detail::get_u32(bytes, pos);
  s.d_e = detail::get_u32(bytes, pos);
  s.d_t = detail::get_u32(bytes, pos);
  s.d_bil = detail::get_u32(bytes, pos);
  s.k_rbf = detail::get_u32(bytes, pos);
  s.l_sbf = detail::get_u32(bytes, pos);
  const auto variant = detail::get_u32(bytes, pos);
  if (variant > 1)
    throw Error("params container: unknown variant " + std::to_string(variant));
  s.variant = static_cast<Variant>(variant);
  if (s.blocks < 1 || s.d_u < 1 || s.d_v < 1 || s.d_e < 1 || s.d_t < 1 ||
      s.d_bil < 1 || s.k_rbf < 1 || s.l_sbf < 1)
    throw Error("params container: zero dimension in header");
  ModelParams p = make_zero_params(s);
  const std::size_t need = pos + 8 * p.count();
  if (bytes.size() != need)
    throw Error("params container: expected " + std::to_string(need) +
                " bytes, got " + std::to_string(bytes.size()));
  p.for_each([&](const std::string &, Matrix &m, std::size_t) {
    for (auto &v : m.flat())
      v = detail::get_f64(bytes, pos);
  });
  return p;
}

inline void save_params(const ModelParams &p, const std::string &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error("cannot write '" + path + "'");
  const auto bytes = serialize_params(p);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline ModelParams load_params(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return deserialize_params(bytes);
}

} // namespace egnpar
