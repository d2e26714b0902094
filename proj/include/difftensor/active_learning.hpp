#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "difftensor/data_model.hpp"
#include "difftensor/error.hpp"
#include "difftensor/factor_models.hpp"

namespace difftensor {

/// Temperature-averaged predictive std per (solute, solvent).
struct UncertaintyMap {
  std::size_t n_solutes = 0, n_solvents = 0;
  std::vector<double> values;  // row-major [i][j]

  double operator()(std::size_t i, std::size_t j) const {
    return values[i * n_solvents + j];
  }
};

inline UncertaintyMap uncertainty_map(const CompletedTensor& t) {
  if (t.n_temps == 0) throw ValidationError("completed tensor has no temperatures");
  UncertaintyMap m{t.n_solutes, t.n_solvents,
                   std::vector<double>(t.n_solutes * t.n_solvents, 0.0)};
  for (std::size_t i = 0; i < t.n_solutes; ++i)
    for (std::size_t j = 0; j < t.n_solvents; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < t.n_temps; ++k) s += t(i, j, k).ln_d_std;
      m.values[i * t.n_solvents + j] = s / static_cast<double>(t.n_temps);
    }
  return m;
}

/// Unmeasured pairs eligible for selection, with the consecutive-selection
/// counters that drive component exclusion. A threshold of 0 never excludes.
struct SamplingPool {
  std::set<Pair> candidates;
  std::vector<std::size_t> solute_streak, solvent_streak;
  std::set<std::size_t> excluded_solutes, excluded_solvents;
  std::size_t threshold = 3;

  bool contains(const Pair& p) const { return candidates.count(p) > 0; }
  bool empty() const { return candidates.empty(); }
  std::size_t size() const { return candidates.size(); }

  void remove(const Pair& p) { candidates.erase(p); }

  void exclude_solute(std::size_t i) {
    excluded_solutes.insert(i);
    std::erase_if(candidates, [&](const Pair& p) { return p.first == i; });
  }
  void exclude_solvent(std::size_t j) {
    excluded_solvents.insert(j);
    std::erase_if(candidates, [&](const Pair& p) { return p.second == j; });
  }
};

/// Pool of every pair without data at any temperature. When `eligible` is
/// given, candidates are further restricted to it.
inline SamplingPool make_pool(const ObservationTensor& tensor,
                              std::size_t threshold = 3,
                              const std::set<Pair>* eligible = nullptr) {
  SamplingPool pool;
  pool.threshold = threshold;
  pool.solute_streak.assign(tensor.n_solutes(), 0);
  pool.solvent_streak.assign(tensor.n_solvents(), 0);
  for (std::size_t i = 0; i < tensor.n_solutes(); ++i)
    for (std::size_t j = 0; j < tensor.n_solvents(); ++j)
      if (!tensor.has_pair(i, j) && (!eligible || eligible->count({i, j})))
        pool.candidates.insert({i, j});
  return pool;
}

/// Pool candidate with the largest mean uncertainty; ties go to the lowest
/// solute index, then the lowest solvent index.
inline Pair select_query(const UncertaintyMap& map, const SamplingPool& pool) {
  if (pool.empty()) throw PoolExhaustedError("sampling pool is exhausted");
  std::optional<Pair> best;
  double best_value = -std::numeric_limits<double>::infinity();
  for (const Pair& p : pool.candidates) {  // ascending (i, j)
    if (p.first >= map.n_solutes || p.second >= map.n_solvents)
      throw RangeError("pool candidate outside the uncertainty map");
    double v = map(p.first, p.second);
    if (!best || v > best_value) {
      best = p;
      best_value = v;
    }
  }
  return *best;
}

/// Uniformly random pool candidate.
inline Pair select_random(const SamplingPool& pool, std::uint64_t seed) {
  if (pool.empty()) throw PoolExhaustedError("sampling pool is exhausted");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  return *std::next(pool.candidates.begin(),
                    static_cast<std::ptrdiff_t>(pick(rng)));
}

/// Applies one selection: removes the pair, advances the streaks of its
/// solute and solvent, resets every other streak and excludes components
/// whose streak reaches the threshold.
inline void record_selection(SamplingPool& pool, const Pair& p) {
  if (!pool.contains(p))
    throw ValidationError("pair (" + std::to_string(p.first) + ", " +
                          std::to_string(p.second) + ") is not in the pool");
  pool.remove(p);
  for (std::size_t i = 0; i < pool.solute_streak.size(); ++i)
    pool.solute_streak[i] = i == p.first ? pool.solute_streak[i] + 1 : 0;
  for (std::size_t j = 0; j < pool.solvent_streak.size(); ++j)
    pool.solvent_streak[j] = j == p.second ? pool.solvent_streak[j] + 1 : 0;
  if (pool.threshold == 0) return;
  if (pool.solute_streak[p.first] >= pool.threshold) pool.exclude_solute(p.first);
  if (pool.solvent_streak[p.second] >= pool.threshold)
    pool.exclude_solvent(p.second);
}

inline nlohmann::json to_json(const SamplingPool& p) {
  nlohmann::json cands = nlohmann::json::array();
  for (auto& c : p.candidates) cands.push_back({c.first, c.second});
  return {{"candidates", cands},
          {"solute_streak", p.solute_streak},
          {"solvent_streak", p.solvent_streak},
          {"excluded_solutes", p.excluded_solutes},
          {"excluded_solvents", p.excluded_solvents},
          {"threshold", p.threshold}};
}

inline SamplingPool pool_from_json(const nlohmann::json& j) {
  SamplingPool p;
  for (auto& c : j.at("candidates"))
    p.candidates.insert({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>()});
  p.solute_streak = j.at("solute_streak").get<std::vector<std::size_t>>();
  p.solvent_streak = j.at("solvent_streak").get<std::vector<std::size_t>>();
  p.excluded_solutes = j.at("excluded_solutes").get<std::set<std::size_t>>();
  p.excluded_solvents = j.at("excluded_solvents").get<std::set<std::size_t>>();
  p.threshold = j.at("threshold").get<std::size_t>();
  return p;
}

struct MeasurementRecord {
  std::size_t i = 0, j = 0;
  double temperature = 0;
  double d = 0;                 // m^2/s
  std::optional<double> sigma;  // m^2/s
  std::string timestamp;        // ISO 8601, UTC
  bool out_of_band = false;
};

inline std::string utc_timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json to_json(const MeasurementRecord& m) {
  nlohmann::json j = {{"i", m.i},     {"j", m.j},
                      {"temperature", m.temperature},
                      {"d", m.d},     {"timestamp", m.timestamp},
                      {"out_of_band", m.out_of_band}};
  j["sigma"] = m.sigma ? nlohmann::json(*m.sigma) : nlohmann::json(nullptr);
  return j;
}

inline MeasurementRecord measurement_from_json(const nlohmann::json& j) {
  MeasurementRecord m;
  m.i = j.at("i").get<std::size_t>();
  m.j = j.at("j").get<std::size_t>();
  m.temperature = j.at("temperature").get<double>();
  m.d = j.at("d").get<double>();
  if (j.contains("sigma") && !j.at("sigma").is_null())
    m.sigma = j.at("sigma").get<double>();
  m.timestamp = j.value("timestamp", "");
  m.out_of_band = j.value("out_of_band", false);
  return m;
}

/// Pool, append-only measurement log and round counter of one campaign.
struct CampaignState {
  SamplingPool pool;
  std::vector<MeasurementRecord> log;
  std::size_t round = 0;  // completed (i, j) selections
  std::uint64_t seed = 0;
  std::string checkpoint_hash;
};

inline nlohmann::json to_json(const CampaignState& s) {
  nlohmann::json log = nlohmann::json::array();
  for (auto& m : s.log) log.push_back(to_json(m));
  return {{"pool", to_json(s.pool)},
          {"log", log},
          {"round", s.round},
          {"seed", s.seed},
          {"checkpoint_hash", s.checkpoint_hash}};
}

inline CampaignState campaign_state_from_json(const nlohmann::json& j) {
  CampaignState s;
  s.pool = pool_from_json(j.at("pool"));
  for (auto& m : j.at("log")) s.log.push_back(measurement_from_json(m));
  s.round = j.at("round").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.checkpoint_hash = j.value("checkpoint_hash", "");
  return s;
}

}  // namespace difftensor
