// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "egnpar/atomgraph/basis.hpp"
#include "egnpar/core/error.hpp"

#include "json.hpp"

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

namespace egnpar {

/// dimenet: Hadamard triplet interaction, energy-centric (forces = -dE/dx).
/// gemnet: bilinear triplet interaction, second edge update, symmetric
/// message coupling, force-centric (direct force head).
enum class Variant : std::uint32_t { dimenet = 0, gemnet = 1 };

inline std::string_view to_string(Variant v) {
  return v == Variant::dimenet ? "dimenet" : "gemnet";
}

inline Variant variant_from_string(std::string_view s) {
  if (s == "dimenet" || s == "dimenet-style")
    return Variant::dimenet;
  if (s == "gemnet" || s == "gemnet-style")
    return Variant::gemnet;
  throw Error("unknown variant '" + std::string(s) + "'");
}

inline bool energy_centric(Variant v) { return v == Variant::dimenet; }

/// Dimensions that fix the layout of a parameter set.
struct ParamShape {
  Variant variant = Variant::dimenet;
  std::uint32_t blocks = 2;
  std::uint32_t d_u = 4;
  std::uint32_t d_v = 8;
  std::uint32_t d_e = 8;
  std::uint32_t d_t = 4;
  std::uint32_t d_bil = 4;
  std::uint32_t k_rbf = 6;
  std::uint32_t l_sbf = 3;

  bool operator==(const ParamShape &) const = default;
};

/// Full model configuration. JSON keys equal the field names.
struct ModelConfig {
  Variant variant = Variant::dimenet;
  std::uint32_t blocks = 2;
  std::uint32_t d_u = 4;
  std::uint32_t d_v = 8;
  std::uint32_t d_e = 8;
  std::uint32_t d_t = 4;
  std::uint32_t d_bil = 4;
  std::uint32_t k_rbf = 6;
  std::uint32_t l_sbf = 3;
  double cutoff = 1.5;
  std::uint64_t seed = 0;
  std::uint32_t workers = 1;
  /// Replace the Gaussian basis with (d - diagnostic_r0)^2 and read the
  /// energy out as a sum over edge features. Test fixtures only.
  bool diagnostic = false;
  double diagnostic_r0 = 1.5;

  void validate() const {
    if (blocks < 1 || d_u < 1 || d_v < 1 || d_e < 1 || d_t < 1 || d_bil < 1 ||
        k_rbf < 1 || l_sbf < 1)
      throw Error("ModelConfig: all dimensions must be >= 1");
    if (!(cutoff > 0.0))
      throw Error("ModelConfig: cutoff must be positive");
    if (workers < 1)
      throw Error("ModelConfig: workers must be >= 1");
    if (diagnostic && k_rbf != 1)
      throw Error("ModelConfig: diagnostic basis requires k_rbf = 1");
  }

  ParamShape shape() const {
    return {variant, blocks, d_u, d_v, d_e, d_t, d_bil, k_rbf, l_sbf};
  }

  RadialBasis radial_basis() const {
    return {diagnostic ? RadialBasis::Kind::quadratic
                       : RadialBasis::Kind::gaussian,
            k_rbf, cutoff, diagnostic_r0};
  }
};

inline void to_json(nlohmann::json &j, const ModelConfig &c) {
  j = nlohmann::json{{"variant", std::string(to_string(c.variant))},
                     {"blocks", c.blocks},
                     {"d_u", c.d_u},
                     {"d_v", c.d_v},
                     {"d_e", c.d_e},
                     {"d_t", c.d_t},
                     {"d_bil", c.d_bil},
                     {"k_rbf", c.k_rbf},
                     {"l_sbf", c.l_sbf},
                     {"cutoff", c.cutoff},
                     {"seed", c.seed},
                     {"workers", c.workers},
                     {"diagnostic", c.diagnostic},
                     {"diagnostic_r0", c.diagnostic_r0}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json &j, ModelConfig &c) {
  static const char *known[] = {"variant", "blocks",  "d_u",        "d_v",
                                "d_e",     "d_t",     "d_bil",      "k_rbf",
                                "l_sbf",   "cutoff",  "seed",       "workers",
                                "diagnostic", "diagnostic_r0"};
  if (!j.is_object())
    throw Error("ModelConfig JSON must be an object");
  for (const auto &[key, _] : j.items()) {
    bool ok = false;
    for (const char *k : known)
      ok = ok || key == k;
    if (!ok)
      throw Error("ModelConfig JSON: unknown key '" + key + "'");
  }
  if (j.contains("variant"))
    c.variant = variant_from_string(j.at("variant").get<std::string>());
  auto get = [&](const char *k, auto &field) {
    if (j.contains(k))
      j.at(k).get_to(field);
  };
  get("blocks", c.blocks);
  get("d_u", c.d_u);
  get("d_v", c.d_v);
  get("d_e", c.d_e);
  get("d_t", c.d_t);
  get("d_bil", c.d_bil);
  get("k_rbf", c.k_rbf);
  get("l_sbf", c.l_sbf);
  get("cutoff", c.cutoff);
  get("seed", c.seed);
  get("workers", c.workers);
  get("diagnostic", c.diagnostic);
  get("diagnostic_r0", c.diagnostic_r0);
}

inline ModelConfig load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw Error("cannot open config '" + path + "'");
  ModelConfig c;
  try {
    from_json(nlohmann::json::parse(in), c);
  } catch (const nlohmann::json::exception &e) {
    throw Error("config '" + path + "': " + e.what());
  }
  c.validate();
  return c;
}

inline void save_config(const ModelConfig &c, const std::string &path) {
  std::ofstream out(path);
  if (!out)
    throw Error("cannot write config '" + path + "'");
  out << nlohmann::json(c).dump(2) << '\n';
}

} // namespace egnpar
