// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/graph.hpp"
#include "egnpar/core/matrix.hpp"

#include <cmath>
#include <span>

namespace egnpar {

/// Radial basis over edge lengths.
///
/// `gaussian`: K Gaussians exp(-gamma (d - c_k)^2) with centers evenly spaced
/// on [0, cutoff] (a single center sits at 0) and gamma = (K / cutoff)^2.
///
/// `quadratic`: a single diagnostic feature (d - r0)^2. It gives models with
/// an analytically known energy minimum and is only meant for tests.
struct RadialBasis {
  enum class Kind { gaussian, quadratic };

  Kind kind = Kind::gaussian;
  std::size_t count = 1;
  double cutoff = 1.0;
  double r0 = 1.5;

  void validate() const {
    if (count == 0)
      throw Error("radial basis: K_rbf must be >= 1");
    if (!(cutoff > 0.0))
      throw Error("radial basis: cutoff must be positive");
    if (kind == Kind::quadratic && count != 1)
      throw Error("radial basis: quadratic diagnostic basis requires K_rbf = 1");
  }

  double center(std::size_t k) const {
    return count == 1 ? 0.0
                      : cutoff * static_cast<double>(k) /
                            static_cast<double>(count - 1);
  }
  double gamma() const {
    const double s = static_cast<double>(count) / cutoff;
    return s * s;
  }

  double value(double d, std::size_t k) const {
    if (kind == Kind::quadratic)
      return (d - r0) * (d - r0);
    const double x = d - center(k);
    return std::exp(-gamma() * x * x);
  }

  double derivative(double d, std::size_t k) const {
    if (kind == Kind::quadratic)
      return 2.0 * (d - r0);
    const double x = d - center(k);
    return -2.0 * gamma() * x * std::exp(-gamma() * x * x);
  }
};

/// Edge RBF rows and triplet SBF rows for one graph.
struct BasisFeatures {
  Matrix edge_rbf;    // N_e x K
  Matrix triplet_sbf; // N_t x (K * L)
};

/// N x K matrix of radial features.
inline Matrix rbf_features(std::span<const double> distances,
                           const RadialBasis &basis) {
  basis.validate();
  Matrix out(distances.size(), basis.count);
  for (std::size_t e = 0; e < distances.size(); ++e)
    for (std::size_t k = 0; k < basis.count; ++k)
      out(e, k) = basis.value(distances[e], k);
  return out;
}

/// Convenience overload with a Gaussian basis.
inline Matrix rbf_features(std::span<const double> distances,
                           std::size_t k_rbf, double cutoff) {
  return rbf_features(distances, RadialBasis{RadialBasis::Kind::gaussian,
                                             k_rbf, cutoff, 0.0});
}

/// Outer product of the radial basis of the in-edge length and cos(l alpha)
/// for l = 0..L-1, flattened as column k * L + l.
inline Matrix sbf_features(std::span<const double> in_edge_distances,
                           std::span<const double> angles,
                           const RadialBasis &basis, std::size_t l_sbf) {
  basis.validate();
  if (l_sbf == 0)
    throw Error("sbf_features: L_sbf must be >= 1");
  if (in_edge_distances.size() != angles.size())
    throw ShapeError("sbf_features: distances/angles length mismatch");
  Matrix out(angles.size(), basis.count * l_sbf);
  for (std::size_t t = 0; t < angles.size(); ++t)
    for (std::size_t k = 0; k < basis.count; ++k) {
      const double radial = basis.value(in_edge_distances[t], k);
      for (std::size_t l = 0; l < l_sbf; ++l)
        out(t, k * l_sbf + l) =
            radial * std::cos(static_cast<double>(l) * angles[t]);
    }
  return out;
}

inline Matrix sbf_features(std::span<const double> in_edge_distances,
                           std::span<const double> angles, std::size_t k_rbf,
                           std::size_t l_sbf, double cutoff) {
  return sbf_features(in_edge_distances, angles,
                      RadialBasis{RadialBasis::Kind::gaussian, k_rbf, cutoff, 0.0},
                      l_sbf);
}

inline BasisFeatures compute_basis(const GraphTopology &topology,
                                   const Geometry &geometry,
                                   const RadialBasis &basis, std::size_t l_sbf) {
  std::vector<double> in_d;
  in_d.reserve(topology.num_triplets());
  for (const auto &t : topology.triplets)
    in_d.push_back(geometry.distances[t.in_edge]);
  return {rbf_features(geometry.distances, basis),
          sbf_features(in_d, geometry.angles, basis, l_sbf)};
}

} // namespace egnpar
