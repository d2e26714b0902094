#pragma once

#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "difftensor/error.hpp"
#include "difftensor/factor_models.hpp"
#include "difftensor/util.hpp"

namespace difftensor {

/// Trained factor set plus the axes it was trained on.
struct Checkpoint {
  std::variant<McmFactors, TcmFactors> factors;
  std::vector<double> temperatures;
  std::vector<int> solute_ids, solvent_ids;
  std::string registry_hash;

  ModelKind kind() const {
    return std::holds_alternative<McmFactors>(factors) ? ModelKind::mcm
                                                       : ModelKind::tcm;
  }
  const TcmFactors& tcm() const {
    if (auto* f = std::get_if<TcmFactors>(&factors)) return *f;
    throw ValidationError("checkpoint holds an MCM, not a TCM");
  }
  const McmFactors& mcm() const {
    if (auto* f = std::get_if<McmFactors>(&factors)) return *f;
    throw ValidationError("checkpoint holds a TCM, not an MCM");
  }

  std::optional<std::size_t> solute_index(int id) const {
    for (std::size_t k = 0; k < solute_ids.size(); ++k)
      if (solute_ids[k] == id) return k;
    return std::nullopt;
  }
  std::optional<std::size_t> solvent_index(int id) const {
    for (std::size_t k = 0; k < solvent_ids.size(); ++k)
      if (solvent_ids[k] == id) return k;
    return std::nullopt;
  }
};

namespace detail {

inline nlohmann::json block_json(const std::vector<GaussianParam>& p,
                                 std::size_t begin, std::size_t count) {
  nlohmann::json mean = nlohmann::json::array(), std = nlohmann::json::array();
  for (std::size_t k = begin; k < begin + count; ++k) {
    mean.push_back(p[k].mean);
    std.push_back(p[k].std);
  }
  return {{"mean", mean}, {"std", std}};
}

inline void read_block(const nlohmann::json& j, const char* name,
                       std::vector<GaussianParam>& p, std::size_t begin,
                       std::size_t count) {
  if (!j.contains(name)) throw ParseError(std::string("checkpoint lacks block ") + name);
  const auto& b = j.at(name);
  const auto& mean = b.at("mean");
  const auto& std = b.at("std");
  if (mean.size() != count || std.size() != count)
    throw ValidationError(std::string("checkpoint block ") + name +
                          " does not match the declared ranks");
  for (std::size_t k = 0; k < count; ++k)
    p[begin + k] = {mean[k].get<double>(), std[k].get<double>()};
}

}  // namespace detail

inline nlohmann::json to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["format"] = "difftensor-checkpoint";
  j["version"] = 1;
  j["model"] = to_string(c.kind());
  j["temperatures"] = c.temperatures;
  j["solute_ids"] = c.solute_ids;
  j["solvent_ids"] = c.solvent_ids;
  j["registry_hash"] = c.registry_hash;
  if (c.kind() == ModelKind::mcm) {
    const auto& f = c.mcm();
    const auto& s = f.shape;
    j["rank"] = s.rank;
    j["ln_offset"] = f.offset;
    j["U"] = detail::block_json(f.params, s.u(0, 0), s.n_solutes * s.rank);
    j["V"] = detail::block_json(f.params, s.v(0, 0), s.n_solvents * s.rank);
  } else {
    const auto& f = c.tcm();
    const auto& s = f.shape;
    j["ranks"] = {s.ranks.u, s.ranks.v, s.ranks.w};
    j["ln_offset"] = f.offset;
    j["U"] = detail::block_json(f.params, s.u(0, 0), s.n_solutes * s.ranks.u);
    j["V"] = detail::block_json(f.params, s.v(0, 0), s.n_solvents * s.ranks.v);
    j["W"] = detail::block_json(f.params, s.w(0, 0), s.n_temps() * s.ranks.w);
    j["core"] = detail::block_json(f.params, s.core(0, 0, 0), s.core_size());
  }
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "difftensor-checkpoint")
      throw ParseError("not a difftensor checkpoint");
    Checkpoint c;
    c.temperatures = j.at("temperatures").get<std::vector<double>>();
    c.solute_ids = j.at("solute_ids").get<std::vector<int>>();
    c.solvent_ids = j.at("solvent_ids").get<std::vector<int>>();
    c.registry_hash = j.value("registry_hash", "");
    const double offset = j.at("ln_offset").get<double>();
    const ModelKind kind = parse_model_kind(j.at("model").get<std::string>());
    if (kind == ModelKind::mcm) {
      McmShape s{c.solute_ids.size(), c.solvent_ids.size(),
                 j.at("rank").get<std::size_t>()};
      McmFactors f(s);
      f.offset = offset;
      detail::read_block(j, "U", f.params, s.u(0, 0), s.n_solutes * s.rank);
      detail::read_block(j, "V", f.params, s.v(0, 0), s.n_solvents * s.rank);
      c.factors = std::move(f);
    } else {
      auto r = j.at("ranks").get<std::vector<std::size_t>>();
      if (r.size() != 3) throw ValidationError("TCM ranks need three entries");
      TcmShape s{c.solute_ids.size(), c.solvent_ids.size(), c.temperatures.size(),
                 {r[0], r[1], r[2]}};
      TcmFactors f(s);
      f.offset = offset;
      detail::read_block(j, "U", f.params, s.u(0, 0), s.n_solutes * s.ranks.u);
      detail::read_block(j, "V", f.params, s.v(0, 0), s.n_solvents * s.ranks.v);
      detail::read_block(j, "W", f.params, s.w(0, 0), s.n_temps() * s.ranks.w);
      detail::read_block(j, "core", f.params, s.core(0, 0, 0), s.core_size());
      c.factors = std::move(f);
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
  return to_json(c).dump(1) + "\n";
}

inline Checkpoint parse_checkpoint(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  return checkpoint_from_json(j);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return parse_checkpoint(read_file(path));
}

/// Content hash of the serialized checkpoint.
inline std::string checkpoint_hash(const Checkpoint& c) {
  return hex64(fnv1a(serialize_checkpoint(c)));
}

}  // namespace difftensor
