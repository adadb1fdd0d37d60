// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/basis.hpp"
#include "egnpar/atomgraph/graph.hpp"
#include "egnpar/autodiff/tape.hpp"

#include <cmath>
#include <memory>
#include <optional>
#include <vector>

// Differentiable primitives. Every op reads its inputs through the tape, so
// the forward closure doubles as the replay function. Index arrays are shared
// between the forward and backward closures.
namespace egnpar::ad {

using Index = std::shared_ptr<const std::vector<std::size_t>>;

inline Index make_index(std::vector<std::size_t> v) {
  return std::make_shared<const std::vector<std::size_t>>(std::move(v));
}

/// Y = X W (+ b). X: N x in, W: in x out, b: 1 x out.
inline Var linear(Tape &t, Var x, Var w, std::optional<Var> b = std::nullopt) {
  {
    const auto &X = t.value(x), &W = t.value(w);
    if (X.cols() != W.rows())
      throw ShapeError("linear: input " + X.shape_string() + " vs weight " +
                       W.shape_string());
    if (b && (t.value(*b).rows() != 1 || t.value(*b).cols() != W.cols()))
      throw ShapeError("linear: bias shape " + t.value(*b).shape_string());
  }
  auto fwd = [x, w, b](const Tape &tp) {
    const auto &X = tp.value(x), &W = tp.value(w);
    Matrix Y(X.rows(), W.cols());
    for (std::size_t i = 0; i < X.rows(); ++i) {
      auto y = Y.row(i);
      if (b) {
        const auto &B = tp.value(*b);
        for (std::size_t j = 0; j < W.cols(); ++j)
          y[j] = B[j];
      }
      for (std::size_t k = 0; k < X.cols(); ++k) {
        const double xv = X(i, k);
        const auto wr = W.row(k);
        for (std::size_t j = 0; j < W.cols(); ++j)
          y[j] += xv * wr[j];
      }
    }
    return Y;
  };
  auto bwd = [x, w, b](Tape &tp, const Matrix &G) {
    const auto &X = tp.value(x), &W = tp.value(w);
    if (tp.requires_grad(x)) {
      Matrix dX(X.rows(), X.cols());
      for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t k = 0; k < X.cols(); ++k) {
          double s = 0.0;
          const auto wr = W.row(k);
          const auto g = G.row(i);
          for (std::size_t j = 0; j < W.cols(); ++j)
            s += g[j] * wr[j];
          dX(i, k) = s;
        }
      tp.accumulate(x, dX);
    }
    if (tp.requires_grad(w)) {
      Matrix dW(W.rows(), W.cols());
      for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t k = 0; k < X.cols(); ++k) {
          const double xv = X(i, k);
          auto dw = dW.row(k);
          const auto g = G.row(i);
          for (std::size_t j = 0; j < W.cols(); ++j)
            dw[j] += xv * g[j];
        }
      tp.accumulate(w, dW);
    }
    if (b && tp.requires_grad(*b)) {
      Matrix dB(1, W.cols());
      for (std::size_t i = 0; i < G.rows(); ++i)
        for (std::size_t j = 0; j < G.cols(); ++j)
          dB[j] += G(i, j);
      tp.accumulate(*b, dB);
    }
  };
  if (b)
    return t.record("linear", {x, w, *b}, fwd, bwd);
  return t.record("linear", {x, w}, fwd, bwd);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Elementwise x * sigmoid(x).
inline Var silu(Tape &t, Var x) {
  return t.record(
      "silu", {x},
      [x](const Tape &tp) {
        Matrix Y = tp.value(x);
        for (auto &v : Y.flat())
          v = v * sigmoid(v);
        return Y;
      },
      [x](Tape &tp, const Matrix &G) {
        const auto &X = tp.value(x);
        Matrix dX(X.rows(), X.cols());
        for (std::size_t i = 0; i < X.size(); ++i) {
          const double s = sigmoid(X[i]);
          dX[i] = G[i] * s * (1.0 + X[i] * (1.0 - s));
        }
        tp.accumulate(x, dX);
      });
}

inline Var add(Tape &t, Var a, Var b) {
  t.value(a).require_same_shape(t.value(b), "add");
  return t.record(
      "add", {a, b},
      [a, b](const Tape &tp) {
        Matrix Y = tp.value(a);
        Y += tp.value(b);
        return Y;
      },
      [a, b](Tape &tp, const Matrix &G) {
        tp.accumulate(a, G);
        tp.accumulate(b, G);
      });
}

/// Hadamard product.
inline Var mul(Tape &t, Var a, Var b) {
  t.value(a).require_same_shape(t.value(b), "mul");
  return t.record(
      "mul", {a, b},
      [a, b](const Tape &tp) {
        Matrix Y = tp.value(a);
        const auto &B = tp.value(b);
        for (std::size_t i = 0; i < Y.size(); ++i)
          Y[i] *= B[i];
        return Y;
      },
      [a, b](Tape &tp, const Matrix &G) {
        const auto &A = tp.value(a), &B = tp.value(b);
        if (tp.requires_grad(a)) {
          Matrix d(A.rows(), A.cols());
          for (std::size_t i = 0; i < d.size(); ++i)
            d[i] = G[i] * B[i];
          tp.accumulate(a, d);
        }
        if (tp.requires_grad(b)) {
          Matrix d(B.rows(), B.cols());
          for (std::size_t i = 0; i < d.size(); ++i)
            d[i] = G[i] * A[i];
          tp.accumulate(b, d);
        }
      });
}

/// [A | B] along columns.
inline Var concat_cols(Tape &t, Var a, Var b) {
  if (t.value(a).rows() != t.value(b).rows())
    throw ShapeError("concat_cols: row mismatch " + t.value(a).shape_string() +
                     " vs " + t.value(b).shape_string());
  return t.record(
      "concat", {a, b},
      [a, b](const Tape &tp) {
        const auto &A = tp.value(a), &B = tp.value(b);
        Matrix Y(A.rows(), A.cols() + B.cols());
        for (std::size_t i = 0; i < A.rows(); ++i) {
          auto y = Y.row(i);
          std::copy(A.row(i).begin(), A.row(i).end(), y.begin());
          std::copy(B.row(i).begin(), B.row(i).end(), y.begin() + A.cols());
        }
        return Y;
      },
      [a, b](Tape &tp, const Matrix &G) {
        const auto &A = tp.value(a), &B = tp.value(b);
        Matrix dA(A.rows(), A.cols()), dB(B.rows(), B.cols());
        for (std::size_t i = 0; i < A.rows(); ++i) {
          const auto g = G.row(i);
          std::copy(g.begin(), g.begin() + A.cols(), dA.row(i).begin());
          std::copy(g.begin() + A.cols(), g.end(), dB.row(i).begin());
        }
        tp.accumulate(a, dA);
        tp.accumulate(b, dB);
      });
}

/// Row k of the output is row idx[k] of X. Adjoint: scatter-add.
inline Var gather_rows(Tape &t, Var x, Index idx) {
  for (std::size_t i : *idx)
    if (i >= t.value(x).rows())
      throw ShapeError("gather_rows: index out of range");
  return t.record(
      "gather", {x},
      [x, idx](const Tape &tp) {
        const auto &X = tp.value(x);
        Matrix Y(idx->size(), X.cols());
        for (std::size_t k = 0; k < idx->size(); ++k) {
          const auto src = X.row((*idx)[k]);
          std::copy(src.begin(), src.end(), Y.row(k).begin());
        }
        return Y;
      },
      [x, idx](Tape &tp, const Matrix &G) {
        auto &dX = tp.grad_buffer(x);
        for (std::size_t k = 0; k < idx->size(); ++k) {
          auto d = dX.row((*idx)[k]);
          const auto g = G.row(k);
          for (std::size_t j = 0; j < g.size(); ++j)
            d[j] += g[j];
        }
      });
}

/// Output has `rows` rows; row idx[k] accumulates row k of X, in increasing k.
/// Adjoint: gather (broadcast of the grouped sum).
inline Var scatter_add_rows(Tape &t, Var x, Index idx, std::size_t rows) {
  if (idx->size() != t.value(x).rows())
    throw ShapeError("scatter_add_rows: index length " +
                     std::to_string(idx->size()) + " vs rows " +
                     std::to_string(t.value(x).rows()));
  for (std::size_t i : *idx)
    if (i >= rows)
      throw ShapeError("scatter_add_rows: index out of range");
  return t.record(
      "scatter_add", {x},
      [x, idx, rows](const Tape &tp) {
        const auto &X = tp.value(x);
        Matrix Y(rows, X.cols());
        for (std::size_t k = 0; k < idx->size(); ++k) {
          auto y = Y.row((*idx)[k]);
          const auto src = X.row(k);
          for (std::size_t j = 0; j < src.size(); ++j)
            y[j] += src[j];
        }
        return Y;
      },
      [x, idx](Tape &tp, const Matrix &G) {
        const auto &X = tp.value(x);
        Matrix dX(X.rows(), X.cols());
        for (std::size_t k = 0; k < idx->size(); ++k) {
          const auto g = G.row((*idx)[k]);
          std::copy(g.begin(), g.end(), dX.row(k).begin());
        }
        tp.accumulate(x, dX);
      });
}

/// 1 x cols sum over rows.
inline Var sum_rows(Tape &t, Var x) {
  return t.record(
      "sum_rows", {x},
      [x](const Tape &tp) {
        const auto &X = tp.value(x);
        Matrix Y(1, X.cols());
        for (std::size_t i = 0; i < X.rows(); ++i)
          for (std::size_t j = 0; j < X.cols(); ++j)
            Y[j] += X(i, j);
        return Y;
      },
      [x](Tape &tp, const Matrix &G) {
        const auto &X = tp.value(x);
        Matrix dX(X.rows(), X.cols());
        for (std::size_t i = 0; i < X.rows(); ++i)
          for (std::size_t j = 0; j < X.cols(); ++j)
            dX(i, j) = G[j];
        tp.accumulate(x, dX);
      });
}

/// Y(i, j) = X(i, j) * s(i, 0).
inline Var scale_rows(Tape &t, Var x, Var s) {
  if (t.value(s).cols() != 1 || t.value(s).rows() != t.value(x).rows())
    throw ShapeError("scale_rows: scale must be N x 1");
  return t.record(
      "scale_rows", {x, s},
      [x, s](const Tape &tp) {
        Matrix Y = tp.value(x);
        const auto &S = tp.value(s);
        for (std::size_t i = 0; i < Y.rows(); ++i)
          for (auto &v : Y.row(i))
            v *= S[i];
        return Y;
      },
      [x, s](Tape &tp, const Matrix &G) {
        const auto &X = tp.value(x), &S = tp.value(s);
        if (tp.requires_grad(x)) {
          Matrix dX(X.rows(), X.cols());
          for (std::size_t i = 0; i < X.rows(); ++i)
            for (std::size_t j = 0; j < X.cols(); ++j)
              dX(i, j) = G(i, j) * S[i];
          tp.accumulate(x, dX);
        }
        if (tp.requires_grad(s)) {
          Matrix dS(S.rows(), 1);
          for (std::size_t i = 0; i < X.rows(); ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < X.cols(); ++j)
              acc += G(i, j) * X(i, j);
            dS[i] = acc;
          }
          tp.accumulate(s, dS);
        }
      });
}

// ---------------------------------------------------------------------------
// Geometry. Positions are an n x 3 matrix; atom index lists are flattened
// tuples (2 per edge, 3 per angle).

namespace detail {
inline Vec3 pos_row(const Matrix &P, std::size_t i) {
  return {P(i, 0), P(i, 1), P(i, 2)};
}
inline void add_row(Matrix &M, std::size_t i, double s, const Vec3 &v) {
  M(i, 0) += s * v[0];
  M(i, 1) += s * v[1];
  M(i, 2) += s * v[2];
}
} // namespace detail

/// Edge lengths |x_r - x_s| as an N x 1 matrix. `pairs` holds (s, r) tuples.
inline Var edge_lengths(Tape &t, Var pos, Index pairs) {
  return t.record(
      "edge_lengths", {pos},
      [pos, pairs](const Tape &tp) {
        const auto &P = tp.value(pos);
        const std::size_t n = pairs->size() / 2;
        Matrix D(n, 1);
        for (std::size_t e = 0; e < n; ++e)
          D[e] = norm(detail::pos_row(P, (*pairs)[2 * e + 1]) -
                      detail::pos_row(P, (*pairs)[2 * e]));
        return D;
      },
      [pos, pairs](Tape &tp, const Matrix &G) {
        const auto &P = tp.value(pos);
        auto &dP = tp.grad_buffer(pos);
        const std::size_t n = pairs->size() / 2;
        for (std::size_t e = 0; e < n; ++e) {
          const std::size_t s = (*pairs)[2 * e], r = (*pairs)[2 * e + 1];
          const Vec3 v = detail::pos_row(P, r) - detail::pos_row(P, s);
          const Vec3 u = (1.0 / norm(v)) * v;
          detail::add_row(dP, r, G[e], u);
          detail::add_row(dP, s, -G[e], u);
        }
      });
}

/// Unit vectors (x_r - x_s) / |x_r - x_s| as an N x 3 matrix.
inline Var edge_unit_vectors(Tape &t, Var pos, Index pairs) {
  return t.record(
      "edge_unit_vectors", {pos},
      [pos, pairs](const Tape &tp) {
        const auto &P = tp.value(pos);
        const std::size_t n = pairs->size() / 2;
        Matrix U(n, 3);
        for (std::size_t e = 0; e < n; ++e) {
          const Vec3 v = detail::pos_row(P, (*pairs)[2 * e + 1]) -
                         detail::pos_row(P, (*pairs)[2 * e]);
          const double d = norm(v);
          for (int c = 0; c < 3; ++c)
            U(e, c) = v[c] / d;
        }
        return U;
      },
      [pos, pairs](Tape &tp, const Matrix &G) {
        const auto &P = tp.value(pos);
        auto &dP = tp.grad_buffer(pos);
        const std::size_t n = pairs->size() / 2;
        for (std::size_t e = 0; e < n; ++e) {
          const std::size_t s = (*pairs)[2 * e], r = (*pairs)[2 * e + 1];
          const Vec3 v = detail::pos_row(P, r) - detail::pos_row(P, s);
          const double d = norm(v);
          const Vec3 u = (1.0 / d) * v;
          const Vec3 g{G(e, 0), G(e, 1), G(e, 2)};
          // du/dv = (I - u u^T) / d
          const Vec3 dv = (1.0 / d) * (g - dot(u, g) * u);
          detail::add_row(dP, r, 1.0, dv);
          detail::add_row(dP, s, -1.0, dv);
        }
      });
}

/// Bond angles at j for (k, j, i) tuples, N x 1.
inline Var bond_angles(Tape &t, Var pos, Index kji) {
  return t.record(
      "bond_angles", {pos},
      [pos, kji](const Tape &tp) {
        const auto &P = tp.value(pos);
        const std::size_t n = kji->size() / 3;
        Matrix A(n, 1);
        for (std::size_t m = 0; m < n; ++m)
          A[m] = bond_angle(detail::pos_row(P, (*kji)[3 * m]),
                            detail::pos_row(P, (*kji)[3 * m + 1]),
                            detail::pos_row(P, (*kji)[3 * m + 2]));
        return A;
      },
      [pos, kji](Tape &tp, const Matrix &G) {
        const auto &P = tp.value(pos);
        auto &dP = tp.grad_buffer(pos);
        const std::size_t n = kji->size() / 3;
        for (std::size_t m = 0; m < n; ++m) {
          const std::size_t k = (*kji)[3 * m], j = (*kji)[3 * m + 1],
                            i = (*kji)[3 * m + 2];
          const auto ag = angle_gradient(detail::pos_row(P, k),
                                         detail::pos_row(P, j),
                                         detail::pos_row(P, i));
          detail::add_row(dP, k, G[m], ag.d_k);
          detail::add_row(dP, j, G[m], ag.d_j);
          detail::add_row(dP, i, G[m], ag.d_i);
        }
      });
}

// ---------------------------------------------------------------------------
// Basis functions.

/// N x 1 distances -> N x K radial features.
inline Var radial_basis(Tape &t, Var d, RadialBasis basis) {
  basis.validate();
  return t.record(
      "radial_basis", {d},
      [d, basis](const Tape &tp) {
        const auto &D = tp.value(d);
        return rbf_features(D.flat(), basis);
      },
      [d, basis](Tape &tp, const Matrix &G) {
        const auto &D = tp.value(d);
        Matrix dD(D.rows(), 1);
        for (std::size_t e = 0; e < D.rows(); ++e) {
          double acc = 0.0;
          for (std::size_t k = 0; k < basis.count; ++k)
            acc += G(e, k) * basis.derivative(D[e], k);
          dD[e] = acc;
        }
        tp.accumulate(d, dD);
      });
}

/// (N x 1 distances, N x 1 angles) -> N x (K * L) features.
inline Var spherical_basis(Tape &t, Var d, Var alpha, RadialBasis basis,
                           std::size_t l_sbf) {
  basis.validate();
  if (l_sbf == 0)
    throw Error("spherical_basis: L_sbf must be >= 1");
  return t.record(
      "spherical_basis", {d, alpha},
      [d, alpha, basis, l_sbf](const Tape &tp) {
        return sbf_features(tp.value(d).flat(), tp.value(alpha).flat(), basis,
                            l_sbf);
      },
      [d, alpha, basis, l_sbf](Tape &tp, const Matrix &G) {
        const auto &D = tp.value(d), &A = tp.value(alpha);
        Matrix dD(D.rows(), 1), dA(A.rows(), 1);
        for (std::size_t m = 0; m < D.rows(); ++m) {
          double gd = 0.0, ga = 0.0;
          for (std::size_t k = 0; k < basis.count; ++k) {
            const double r = basis.value(D[m], k);
            const double dr = basis.derivative(D[m], k);
            for (std::size_t l = 0; l < l_sbf; ++l) {
              const double g = G(m, k * l_sbf + l);
              const double la = static_cast<double>(l) * A[m];
              gd += g * dr * std::cos(la);
              ga -= g * r * static_cast<double>(l) * std::sin(la);
            }
          }
          dD[m] = gd;
          dA[m] = ga;
        }
        tp.accumulate(d, dD);
        tp.accumulate(alpha, dA);
      });
}

} // namespace egnpar::ad
