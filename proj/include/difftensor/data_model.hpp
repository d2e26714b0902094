#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "difftensor/error.hpp"
#include "difftensor/util.hpp"

namespace difftensor {

enum class Role { solute, solvent, both };

inline std::string to_string(Role r) {
  switch (r) {
    case Role::solute: return "solute";
    case Role::solvent: return "solvent";
    case Role::both: return "both";
  }
  return "solute";
}

inline bool is_solute(Role r) { return r != Role::solvent; }
inline bool is_solvent(Role r) { return r != Role::solute; }

/// Coefficients of eta = exp(A + B/T + C ln T + D T^E), eta in Pa s.
struct ViscosityCorrelation {
  double a = 0, b = 0, c = 0, d = 0, e = 0;
  double t_min = 0, t_max = 0;
};

struct Component {
  int id = 0;
  std::string name;
  std::string smiles;  // opaque
  double molar_mass = 0;  // g/mol
  Role role = Role::solute;
  std::optional<ViscosityCorrelation> viscosity;
};

class ComponentRegistry {
 public:
  ComponentRegistry() = default;

  void add(Component c) {
    if (by_id_.count(c.id))
      throw ValidationError("duplicate component id " + std::to_string(c.id));
    if (!(c.molar_mass > 0))
      throw ValidationError("component " + std::to_string(c.id) +
                            ": molar mass must be positive");
    if (is_solvent(c.role) && !c.viscosity)
      throw ValidationError("solvent " + std::to_string(c.id) +
                            " lacks viscosity coefficients");
    by_id_[c.id] = components_.size();
    components_.push_back(std::move(c));
  }

  const Component& at(int id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end())
      throw ValidationError("unknown component id " + std::to_string(id));
    return components_[it->second];
  }
  bool contains(int id) const { return by_id_.count(id) != 0; }

  const std::vector<Component>& components() const { return components_; }
  std::size_t size() const { return components_.size(); }

  /// Ids of components usable as solute, ascending.
  std::vector<int> solute_ids() const { return ids_where(is_solute); }
  std::vector<int> solvent_ids() const { return ids_where(is_solvent); }

  /// Content hash over the canonical CSV serialization.
  std::uint64_t hash() const;

 private:
  std::vector<int> ids_where(bool (*pred)(Role)) const {
    std::vector<int> ids;
    for (auto& c : components_)
      if (pred(c.role)) ids.push_back(c.id);
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  std::vector<Component> components_;
  std::unordered_map<int, std::size_t> by_id_;
};

inline constexpr const char* kComponentsHeader =
    "id,name,smiles,molar_mass_g_mol,role,visc_A,visc_B,visc_C,visc_D,visc_E,"
    "visc_Tmin_K,visc_Tmax_K";
inline constexpr const char* kObservationsHeader =
    "solute_id,solvent_id,temperature_K,d_m2_s,sigma_m2_s,source";

inline ComponentRegistry parse_components(std::string_view text) {
  CsvTable t = parse_csv(text);
  const std::size_t c_id = t.column("id"), c_name = t.column("name"),
                    c_smiles = t.column("smiles"),
                    c_mw = t.column("molar_mass_g_mol"),
                    c_role = t.column("role");
  const std::array<std::size_t, 7> c_visc = {
      t.column("visc_A"), t.column("visc_B"),    t.column("visc_C"),
      t.column("visc_D"), t.column("visc_E"),    t.column("visc_Tmin_K"),
      t.column("visc_Tmax_K")};

  ComponentRegistry reg;
  for (auto& row : t.rows) {
    auto& f = row.fields;
    Component c;
    c.id = static_cast<int>(parse_int(f[c_id], row.line, "id"));
    c.name = f[c_name];
    c.smiles = f[c_smiles];
    c.molar_mass = parse_double(f[c_mw], row.line, "molar_mass_g_mol");
    const std::string& role = f[c_role];
    if (role == "solute") c.role = Role::solute;
    else if (role == "solvent") c.role = Role::solvent;
    else if (role == "both") c.role = Role::both;
    else throw ParseError("invalid role '" + role + "'", row.line);

    std::size_t filled = 0;
    for (auto k : c_visc) filled += !f[k].empty();
    if (filled == c_visc.size()) {
      ViscosityCorrelation v;
      v.a = parse_double(f[c_visc[0]], row.line, "visc_A");
      v.b = parse_double(f[c_visc[1]], row.line, "visc_B");
      v.c = parse_double(f[c_visc[2]], row.line, "visc_C");
      v.d = parse_double(f[c_visc[3]], row.line, "visc_D");
      v.e = parse_double(f[c_visc[4]], row.line, "visc_E");
      v.t_min = parse_double(f[c_visc[5]], row.line, "visc_Tmin_K");
      v.t_max = parse_double(f[c_visc[6]], row.line, "visc_Tmax_K");
      if (!(v.t_min < v.t_max))
        throw ValidationError("component " + std::to_string(c.id) +
                              ": viscosity validity range is empty (line " +
                              std::to_string(row.line) + ")");
      c.viscosity = v;
    } else if (filled != 0) {
      throw ParseError("incomplete viscosity coefficients", row.line);
    }
    try {
      reg.add(std::move(c));
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(e.what()) + " (line " +
                            std::to_string(row.line) + ")");
    }
  }
  return reg;
}

inline ComponentRegistry load_components(const std::string& path) {
  return parse_components(read_file(path));
}

inline std::string write_components(const ComponentRegistry& reg) {
  std::string out = std::string(kComponentsHeader) + "\n";
  for (auto& c : reg.components()) {
    out += std::to_string(c.id) + "," + csv_escape(c.name) + "," +
           csv_escape(c.smiles) + "," + format_double(c.molar_mass) + "," +
           to_string(c.role);
    if (c.viscosity) {
      auto& v = *c.viscosity;
      for (double x : {v.a, v.b, v.c, v.d, v.e, v.t_min, v.t_max})
        out += "," + format_double(x);
    } else {
      out += ",,,,,,,";
    }
    out += "\n";
  }
  return out;
}

inline std::uint64_t ComponentRegistry::hash() const {
  return fnv1a(write_components(*this));
}

struct Observation {
  int solute_id = 0;
  int solvent_id = 0;
  double temperature = 0;  // K
  double ln_d = 0;         // ln(D / (m^2/s))
  std::optional<double> sigma;  // absolute, m^2/s
  std::string source;
};

/// Index of one tensor entry: solute row, solvent column, temperature slab.
struct Cell {
  std::size_t i = 0, j = 0, t = 0;
  auto operator<=>(const Cell&) const = default;
};

using Pair = std::pair<std::size_t, std::size_t>;

/// Dense (solute, solvent, temperature) array laid out [i][j][t] row-major.
struct DenseTensor {
  std::size_t n_solutes = 0, n_solvents = 0, n_temps = 0;
  std::vector<double> values;

  DenseTensor() = default;
  DenseTensor(std::size_t ni, std::size_t nj, std::size_t nt, double fill = 0)
      : n_solutes(ni), n_solvents(nj), n_temps(nt), values(ni * nj * nt, fill) {}

  double& operator()(std::size_t i, std::size_t j, std::size_t t) {
    return values[(i * n_solvents + j) * n_temps + t];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t t) const {
    return values[(i * n_solvents + j) * n_temps + t];
  }
  std::size_t size() const { return values.size(); }
};

inline constexpr double kMinPlausibleD = 1e-12;
inline constexpr double kMaxPlausibleD = 1e-6;

inline const std::vector<double>& default_temperature_grid() {
  static const std::vector<double> grid = {298.0, 313.0, 333.0};
  return grid;
}

/// Sparse (solute, solvent, temperature) -> ln D store. Axes list component
/// ids in ascending order so index order equals id order.
class ObservationTensor {
 public:
  ObservationTensor() = default;
  ObservationTensor(std::shared_ptr<const ComponentRegistry> registry,
                    std::vector<int> solute_ids, std::vector<int> solvent_ids,
                    std::vector<double> temperatures)
      : registry_(std::move(registry)),
        solute_ids_(std::move(solute_ids)),
        solvent_ids_(std::move(solvent_ids)),
        temperatures_(std::move(temperatures)) {
    std::sort(solute_ids_.begin(), solute_ids_.end());
    std::sort(solvent_ids_.begin(), solvent_ids_.end());
    for (std::size_t k = 0; k < solute_ids_.size(); ++k)
      solute_index_[solute_ids_[k]] = k;
    for (std::size_t k = 0; k < solvent_ids_.size(); ++k)
      solvent_index_[solvent_ids_[k]] = k;
  }

  /// Tensor spanning every solute and solvent of the registry.
  static ObservationTensor spanning(
      std::shared_ptr<const ComponentRegistry> registry,
      std::vector<double> temperatures) {
    auto su = registry->solute_ids();
    auto sv = registry->solvent_ids();
    return ObservationTensor(std::move(registry), std::move(su), std::move(sv),
                             std::move(temperatures));
  }

  ObservationTensor empty_like() const {
    return ObservationTensor(registry_, solute_ids_, solvent_ids_,
                             temperatures_);
  }

  const std::shared_ptr<const ComponentRegistry>& registry() const {
    return registry_;
  }
  const std::vector<int>& solute_ids() const { return solute_ids_; }
  const std::vector<int>& solvent_ids() const { return solvent_ids_; }
  const std::vector<double>& temperatures() const { return temperatures_; }
  std::size_t n_solutes() const { return solute_ids_.size(); }
  std::size_t n_solvents() const { return solvent_ids_.size(); }
  std::size_t n_temps() const { return temperatures_.size(); }
  std::size_t n_cells() const { return n_solutes() * n_solvents() * n_temps(); }

  std::optional<std::size_t> solute_index(int id) const {
    auto it = solute_index_.find(id);
    if (it == solute_index_.end()) return std::nullopt;
    return it->second;
  }
  std::optional<std::size_t> solvent_index(int id) const {
    auto it = solvent_index_.find(id);
    if (it == solvent_index_.end()) return std::nullopt;
    return it->second;
  }
  /// Slab whose temperature lies within `tolerance` K of t.
  std::optional<std::size_t> temperature_index(double t,
                                               double tolerance = 1.0) const {
    std::optional<std::size_t> best;
    double best_gap = tolerance;
    for (std::size_t k = 0; k < temperatures_.size(); ++k) {
      double gap = std::abs(temperatures_[k] - t);
      if (gap <= best_gap) {
        best = k;
        best_gap = gap;
      }
    }
    return best;
  }

  const std::map<Cell, Observation>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const Observation* find(const Cell& c) const {
    auto it = entries_.find(c);
    return it == entries_.end() ? nullptr : &it->second;
  }
  bool has_pair(std::size_t i, std::size_t j) const {
    for (std::size_t t = 0; t < n_temps(); ++t)
      if (entries_.count({i, j, t})) return true;
    return false;
  }

  /// Inserts or replaces the entry at `c`.
  void set(const Cell& c, Observation obs) {
    if (c.i >= n_solutes() || c.j >= n_solvents() || c.t >= n_temps())
      throw RangeError("cell index out of range");
    entries_[c] = std::move(obs);
  }
  void erase(const Cell& c) { entries_.erase(c); }
  void erase_pair(std::size_t i, std::size_t j) {
    for (std::size_t t = 0; t < n_temps(); ++t) entries_.erase({i, j, t});
  }

  /// Distinct observed (i, j) pairs, ordered.
  std::set<Pair> pairs() const {
    std::set<Pair> out;
    for (auto& [c, _] : entries_) out.insert({c.i, c.j});
    return out;
  }

  /// Observations retained at temperatures outside every grid bin.
  const std::vector<Observation>& continuous() const { return continuous_; }
  std::vector<Observation>& continuous() { return continuous_; }

 private:
  std::shared_ptr<const ComponentRegistry> registry_;
  std::vector<int> solute_ids_, solvent_ids_;
  std::vector<double> temperatures_;
  std::unordered_map<int, std::size_t> solute_index_, solvent_index_;
  std::map<Cell, Observation> entries_;
  std::vector<Observation> continuous_;
};

inline void validate_observation(const ComponentRegistry& reg,
                                 const Observation& o, std::size_t line) {
  auto where = [&] {
    return line ? " (line " + std::to_string(line) + ")" : std::string();
  };
  if (!reg.contains(o.solute_id) || !is_solute(reg.at(o.solute_id).role))
    throw ValidationError("unknown solute id " + std::to_string(o.solute_id) +
                          where());
  if (!reg.contains(o.solvent_id) || !is_solvent(reg.at(o.solvent_id).role))
    throw ValidationError("unknown solvent id " +
                          std::to_string(o.solvent_id) + where());
  if (!(o.temperature > 0))
    throw ValidationError("temperature must be positive" + where());
  double d = std::exp(o.ln_d);
  if (!(d > kMinPlausibleD && d < kMaxPlausibleD))
    throw ValidationError("diffusion coefficient outside plausible window "
                          "(1e-12, 1e-6) m^2/s" + where());
  if (o.sigma && !(*o.sigma >= 0))
    throw ValidationError("sigma must be non-negative" + where());
}

/// Builds a tensor from observations: grid binning within +-tolerance K,
/// duplicates merged by the mean of ln D, off-grid rows kept as continuous.
inline ObservationTensor build_tensor(
    std::shared_ptr<const ComponentRegistry> registry,
    const std::vector<Observation>& observations,
    std::vector<double> grid = default_temperature_grid(),
    double tolerance = 1.0) {
  ObservationTensor tensor =
      ObservationTensor::spanning(registry, std::move(grid));
  std::map<Cell, std::vector<const Observation*>> groups;
  for (auto& o : observations) {
    validate_observation(*registry, o, 0);
    auto t = tensor.temperature_index(o.temperature, tolerance);
    if (!t) {
      tensor.continuous().push_back(o);
      continue;
    }
    Cell c{*tensor.solute_index(o.solute_id), *tensor.solvent_index(o.solvent_id),
           *t};
    groups[c].push_back(&o);
  }
  for (auto& [cell, group] : groups) {
    Observation merged = *group.front();
    merged.temperature = tensor.temperatures()[cell.t];
    if (group.size() > 1) {
      double sum_ln = 0, sum_sigma = 0;
      std::size_t n_sigma = 0;
      std::set<std::string> sources;
      for (auto* o : group) {
        sum_ln += o->ln_d;
        if (o->sigma) {
          sum_sigma += *o->sigma;
          ++n_sigma;
        }
        if (!o->source.empty()) sources.insert(o->source);
      }
      merged.ln_d = sum_ln / static_cast<double>(group.size());
      merged.sigma = n_sigma ? std::optional<double>(sum_sigma / n_sigma)
                             : std::nullopt;
      merged.source.clear();
      for (auto& s : sources)
        merged.source += (merged.source.empty() ? "" : ";") + s;
    }
    tensor.set(cell, std::move(merged));
  }
  return tensor;
}

/// Parses observations.csv. With `errors` set, invalid rows are reported
/// there (one message per row) and skipped instead of aborting the parse.
inline std::vector<Observation> parse_observations(
    std::string_view text, const ComponentRegistry& reg,
    std::vector<std::string>* errors = nullptr) {
  CsvTable t = parse_csv(text);
  const std::size_t c_su = t.column("solute_id"), c_sv = t.column("solvent_id"),
                    c_t = t.column("temperature_K"), c_d = t.column("d_m2_s"),
                    c_s = t.column("sigma_m2_s"), c_src = t.column("source");
  std::vector<Observation> out;
  for (auto& row : t.rows) {
    try {
      auto& f = row.fields;
      Observation o;
      o.solute_id = static_cast<int>(parse_int(f[c_su], row.line, "solute_id"));
      o.solvent_id = static_cast<int>(parse_int(f[c_sv], row.line, "solvent_id"));
      o.temperature = parse_double(f[c_t], row.line, "temperature_K");
      double d = parse_double(f[c_d], row.line, "d_m2_s");
      if (!(d > 0))
        throw ValidationError("non-positive diffusion coefficient (line " +
                              std::to_string(row.line) + ")");
      o.ln_d = std::log(d);
      if (!f[c_s].empty()) o.sigma = parse_double(f[c_s], row.line, "sigma_m2_s");
      o.source = f[c_src];
      validate_observation(reg, o, row.line);
      out.push_back(std::move(o));
    } catch (const Error& e) {
      if (!errors) throw;
      errors->push_back(e.what());
    }
  }
  return out;
}

inline ObservationTensor load_observations(
    const std::string& path, std::shared_ptr<const ComponentRegistry> registry,
    std::vector<double> grid = default_temperature_grid(),
    double tolerance = 1.0) {
  auto obs = parse_observations(read_file(path), *registry);
  return build_tensor(std::move(registry), obs, std::move(grid), tolerance);
}

inline std::string write_observation_row(const Observation& o) {
  return std::to_string(o.solute_id) + "," + std::to_string(o.solvent_id) +
         "," + format_double(o.temperature) + "," +
         format_double(std::exp(o.ln_d)) + "," +
         (o.sigma ? format_double(*o.sigma) : std::string()) + "," +
         csv_escape(o.source) + "\n";
}

/// Serializes grid entries then continuous rows in observations.csv format.
inline std::string write_observations(const ObservationTensor& tensor) {
  std::string out = std::string(kObservationsHeader) + "\n";
  for (auto& [_, o] : tensor.entries()) out += write_observation_row(o);
  for (auto& o : tensor.continuous()) out += write_observation_row(o);
  return out;
}

struct SlabStats {
  double temperature = 0;
  std::size_t count = 0;
  double occupation_rate = 0;
  std::size_t n_solutes = 0;   // distinct solutes with data in the slab
  std::size_t n_solvents = 0;
};

struct OccupancyReport {
  std::vector<SlabStats> slabs;
  std::size_t total_count = 0;
  std::size_t total_cells = 0;
  double total_rate = 0;
};

inline OccupancyReport occupancy_stats(const ObservationTensor& tensor) {
  OccupancyReport r;
  const std::size_t matrix_cells = tensor.n_solutes() * tensor.n_solvents();
  std::vector<std::set<std::size_t>> su(tensor.n_temps()), sv(tensor.n_temps());
  r.slabs.resize(tensor.n_temps());
  for (std::size_t t = 0; t < tensor.n_temps(); ++t)
    r.slabs[t].temperature = tensor.temperatures()[t];
  for (auto& [c, _] : tensor.entries()) {
    ++r.slabs[c.t].count;
    su[c.t].insert(c.i);
    sv[c.t].insert(c.j);
  }
  for (std::size_t t = 0; t < tensor.n_temps(); ++t) {
    auto& s = r.slabs[t];
    s.n_solutes = su[t].size();
    s.n_solvents = sv[t].size();
    s.occupation_rate =
        matrix_cells ? static_cast<double>(s.count) / matrix_cells : 0.0;
  }
  r.total_count = tensor.size();
  r.total_cells = tensor.n_cells();
  r.total_rate =
      r.total_cells ? static_cast<double>(r.total_count) / r.total_cells : 0.0;
  return r;
}

/// Restricts the tensor to the given component ids, keeping matching entries.
inline ObservationTensor restrict_axes(const ObservationTensor& tensor,
                                       const std::set<int>& solutes,
                                       const std::set<int>& solvents) {
  ObservationTensor out(tensor.registry(),
                        std::vector<int>(solutes.begin(), solutes.end()),
                        std::vector<int>(solvents.begin(), solvents.end()),
                        tensor.temperatures());
  for (auto& [c, o] : tensor.entries()) {
    auto i = out.solute_index(o.solute_id);
    auto j = out.solvent_index(o.solvent_id);
    if (i && j) out.set({*i, *j, c.t}, o);
  }
  for (auto& o : tensor.continuous())
    if (solutes.count(o.solute_id) && solvents.count(o.solvent_id))
      out.continuous().push_back(o);
  return out;
}

/// Iteratively drops solutes and solvents that occur in fewer than
/// `min_count` distinct mixtures until nothing changes.
inline ObservationTensor filter_min_mixtures(const ObservationTensor& tensor,
                                             std::size_t min_count = 2) {
  if (min_count < 1) throw ValidationError("min_count must be >= 1");
  std::set<int> solutes(tensor.solute_ids().begin(), tensor.solute_ids().end());
  std::set<int> solvents(tensor.solvent_ids().begin(),
                         tensor.solvent_ids().end());
  std::set<std::pair<int, int>> mixtures;
  for (auto& [_, o] : tensor.entries())
    mixtures.insert({o.solute_id, o.solvent_id});

  for (bool changed = true; changed;) {
    changed = false;
    std::map<int, std::size_t> n_su, n_sv;
    for (auto& [su, sv] : mixtures)
      if (solutes.count(su) && solvents.count(sv)) {
        ++n_su[su];
        ++n_sv[sv];
      }
    for (auto it = solutes.begin(); it != solutes.end();)
      if (n_su[*it] < min_count) {
        it = solutes.erase(it);
        changed = true;
      } else {
        ++it;
      }
    for (auto it = solvents.begin(); it != solvents.end();)
      if (n_sv[*it] < min_count) {
        it = solvents.erase(it);
        changed = true;
      } else {
        ++it;
      }
  }
  return restrict_axes(tensor, solutes, solvents);
}

}  // namespace difftensor
