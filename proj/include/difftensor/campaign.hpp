#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "difftensor/active_learning.hpp"
#include "difftensor/bayes.hpp"
#include "difftensor/checkpoint.hpp"
#include "difftensor/data_model.hpp"
#include "difftensor/error.hpp"
#include "difftensor/evaluation.hpp"
#include "difftensor/factor_models.hpp"

namespace difftensor {

enum class Strategy { uncertainty, random };

inline std::string to_string(Strategy s) {
  return s == Strategy::uncertainty ? "uncertainty" : "random";
}
inline Strategy parse_strategy(std::string_view s) {
  if (s == "uncertainty") return Strategy::uncertainty;
  if (s == "random") return Strategy::random;
  throw ValidationError("unknown query strategy '" + std::string(s) + "'");
}

struct CampaignConfig {
  HybridConfig hybrid;
  TuckerRanks ranks;
  std::size_t threshold = 3;  // 0 disables exclusion
  Strategy strategy = Strategy::uncertainty;
  std::size_t n_samples = kDefaultPredictionSamples;
  std::uint64_t prediction_seed = kDefaultPredictionSeed;
  std::uint64_t seed = 1;
};

inline nlohmann::json to_json(const CampaignConfig& c) {
  return {{"ranks", {c.ranks.u, c.ranks.v, c.ranks.w}},
          {"threshold", c.threshold},
          {"strategy", to_string(c.strategy)},
          {"lambda", c.hybrid.likelihood.scale},
          {"use_synthetic", c.hybrid.use_synthetic},
          {"target_avg_std", c.hybrid.target_avg_std},
          {"max_iterations", c.hybrid.train.max_iterations},
          {"mc_samples", c.hybrid.train.mc_samples},
          {"learning_rate", c.hybrid.train.learning_rate},
          {"n_samples", c.n_samples},
          {"prediction_seed", c.prediction_seed},
          {"seed", c.seed}};
}

/// Reads the keys present in `j` over the defaults in `base`.
inline CampaignConfig campaign_config_from_json(const nlohmann::json& j,
                                                CampaignConfig base = {}) {
  try {
    if (j.contains("ranks")) {
      auto r = j.at("ranks").get<std::vector<std::size_t>>();
      if (r.size() != 3) throw ValidationError("ranks need three entries");
      base.ranks = {r[0], r[1], r[2]};
    }
    base.threshold = j.value("threshold", base.threshold);
    if (j.contains("strategy"))
      base.strategy = parse_strategy(j.at("strategy").get<std::string>());
    base.hybrid.likelihood.scale = j.value("lambda", base.hybrid.likelihood.scale);
    base.hybrid.use_synthetic = j.value("use_synthetic", base.hybrid.use_synthetic);
    base.hybrid.target_avg_std = j.value("target_avg_std", base.hybrid.target_avg_std);
    base.hybrid.train.max_iterations =
        j.value("max_iterations", base.hybrid.train.max_iterations);
    base.hybrid.train.mc_samples = j.value("mc_samples", base.hybrid.train.mc_samples);
    base.hybrid.train.learning_rate =
        j.value("learning_rate", base.hybrid.train.learning_rate);
    base.n_samples = j.value("n_samples", base.n_samples);
    base.prediction_seed = j.value("prediction_seed", base.prediction_seed);
    base.seed = j.value("seed", base.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid campaign config: ") + e.what());
  }
  if (base.ranks.u < 1 || base.ranks.v < 1 || base.ranks.w < 1)
    throw ValidationError("ranks must be >= 1");
  if (!(base.hybrid.likelihood.scale > 0))
    throw ValidationError("lambda must be > 0");
  base.hybrid.train.validate();
  return base;
}

/// One measured temperature of a submitted pair.
struct MeasuredValue {
  double temperature = 0;
  double d = 0;
  std::optional<double> sigma;
};

/// Train / propose / measure loop shared by the simulator and the service.
/// Training for round r uses seed derive_seed(seed, r); the step-1
/// posterior on the synthetic tensor is computed once and reused.
class CampaignEngine {
 public:
  CampaignEngine(ObservationTensor training, std::optional<DenseTensor> synthetic,
                 CampaignConfig cfg, const std::set<Pair>* eligible = nullptr)
      : training_(std::move(training)),
        synthetic_(std::move(synthetic)),
        cfg_(std::move(cfg)) {
    training_.continuous().clear();
    state_.pool = make_pool(training_, cfg_.threshold, eligible);
    state_.seed = cfg_.seed;
    if (synthetic_ && (synthetic_->n_solutes != training_.n_solutes() ||
                       synthetic_->n_solvents != training_.n_solvents() ||
                       synthetic_->n_temps != training_.n_temps()))
      throw ValidationError("synthetic tensor does not match the campaign axes");
    // Fixed from the initial data so that restored sessions train identically.
    HybridConfig hc = cfg_.hybrid;
    hc.use_synthetic = hc.use_synthetic && synthetic_.has_value();
    offset_ = training_offset(hc, hc.use_synthetic ? to_dataset(*synthetic_) : Dataset{},
                              to_dataset(training_));
  }

  const ObservationTensor& training() const { return training_; }
  const CampaignState& state() const { return state_; }
  const CampaignConfig& config() const { return cfg_; }
  bool trained() const { return checkpoint_.has_value(); }
  const Checkpoint& checkpoint() const { return require_trained(), *checkpoint_; }
  const CompletedTensor& completed() const { return require_trained(), completed_; }
  const UncertaintyMap& uncertainty() const { return require_trained(), map_; }

  TcmShape shape() const {
    return {training_.n_solutes(), training_.n_solvents(), training_.n_temps(),
            cfg_.ranks};
  }

  /// Retrains on the current training tensor.
  void train() {
    const TcmShape s = shape();
    HybridConfig hc = cfg_.hybrid;
    hc.use_synthetic = hc.use_synthetic && synthetic_.has_value();
    hc.train.seed = cfg_.seed;
    Dataset exp = to_dataset(training_);
    if (exp.empty()) throw ValidationError("campaign has no training data");
    if (hc.use_synthetic && !pretrained_)
      pretrained_ = pretrain(s, to_dataset(*synthetic_), hc, offset_).factors;
    hc.train.seed = derive_seed(cfg_.seed, state_.round);
    auto r = finetune(s, pretrained_, exp, hc, offset_);
    Checkpoint c;
    c.factors = std::move(r.factors);
    c.temperatures = training_.temperatures();
    c.solute_ids = training_.solute_ids();
    c.solvent_ids = training_.solvent_ids();
    c.registry_hash = hex64(training_.registry()->hash());
    completed_ = complete_tensor(c.tcm(), cfg_.n_samples, cfg_.prediction_seed);
    map_ = uncertainty_map(completed_);
    state_.checkpoint_hash = checkpoint_hash(c);
    checkpoint_ = std::move(c);
  }

  /// The next pair to measure; stable until the state changes.
  Pair propose() const {
    require_trained();
    Pair p = cfg_.strategy == Strategy::uncertainty
                 ? select_query(map_, state_.pool)
                 : select_random(state_.pool, derive_seed(cfg_.seed, 5000 + state_.round));
    if (training_.has_pair(p.first, p.second))
      throw ValidationError("proposed pair already has training data");
    return p;
  }

  /// Appends measurements for pair `p`. A submission for the current
  /// proposal advances the round and the exclusion counters; any other pair
  /// is accepted out of band and only leaves the pool. Unless `partial` is
  /// set, every grid temperature must be covered. `forced_out_of_band`
  /// replays a logged decision without consulting the model.
  bool apply_measurements(const Pair& p, const std::vector<MeasuredValue>& values,
                          bool partial = false,
                          std::optional<bool> forced_out_of_band = std::nullopt,
                          const std::string& timestamp = {}) {
    if (p.first >= training_.n_solutes() || p.second >= training_.n_solvents())
      throw RangeError("pair index out of range");
    if (values.empty()) throw ValidationError("no measured values submitted");
    std::set<std::size_t> slabs;
    std::vector<std::pair<std::size_t, const MeasuredValue*>> rows;
    for (auto& v : values) {
      if (!(v.d > 0) || !std::isfinite(v.d))
        throw ValidationError("diffusion coefficients must be positive and finite");
      if (v.d < kMinPlausibleD || v.d > kMaxPlausibleD)
        throw ValidationError("diffusion coefficient " + format_double(v.d) +
                              " m^2/s outside the plausible window");
      if (v.sigma && !(*v.sigma >= 0))
        throw ValidationError("sigma must be non-negative");
      auto t = training_.temperature_index(v.temperature);
      if (!t)
        throw ValidationError("temperature " + format_double(v.temperature) +
                              " K is not on the campaign grid");
      if (!slabs.insert(*t).second)
        throw ValidationError("duplicate temperature in submission");
      rows.push_back({*t, &v});
    }
    if (!partial && slabs.size() != training_.n_temps())
      throw ValidationError("submission must cover every grid temperature");

    bool out_of_band;
    if (forced_out_of_band) out_of_band = *forced_out_of_band;
    else out_of_band = !(trained() && state_.pool.contains(p) && propose() == p);

    const std::string stamp = timestamp.empty() ? utc_timestamp() : timestamp;
    for (auto& [t, v] : rows) {
      Observation o;
      o.solute_id = training_.solute_ids()[p.first];
      o.solvent_id = training_.solvent_ids()[p.second];
      o.temperature = training_.temperatures()[t];
      o.ln_d = std::log(v->d);
      o.sigma = v->sigma;
      o.source = out_of_band ? "campaign-manual" : "campaign";
      training_.set({p.first, p.second, t}, o);
      state_.log.push_back({p.first, p.second, o.temperature, v->d, v->sigma,
                            stamp, out_of_band});
    }
    if (out_of_band) {
      state_.pool.remove(p);
    } else {
      record_selection(state_.pool, p);
      ++state_.round;
    }
    return out_of_band;
  }

  /// Re-applies a persisted state: pool, counters, round and logged data.
  void restore(const CampaignState& s) {
    for (auto& m : s.log) {
      auto t = training_.temperature_index(m.temperature);
      if (!t) throw ValidationError("logged temperature is off the grid");
      Observation o;
      o.solute_id = training_.solute_ids().at(m.i);
      o.solvent_id = training_.solvent_ids().at(m.j);
      o.temperature = training_.temperatures()[*t];
      o.ln_d = std::log(m.d);
      o.sigma = m.sigma;
      o.source = m.out_of_band ? "campaign-manual" : "campaign";
      training_.set({m.i, m.j, *t}, o);
    }
    state_ = s;
    checkpoint_.reset();
  }

 private:
  void require_trained() const {
    if (!checkpoint_) throw ValidationError("campaign model has not been trained yet");
  }

  ObservationTensor training_;
  std::optional<DenseTensor> synthetic_;
  CampaignConfig cfg_;
  CampaignState state_;
  double offset_ = 0;
  std::optional<TcmFactors> pretrained_;
  std::optional<Checkpoint> checkpoint_;
  CompletedTensor completed_;
  UncertaintyMap map_;
};

struct CurvePoint {
  std::size_t round = 0;
  std::optional<Pair> selected;
  std::size_t n_training = 0;
  std::map<double, MetricSummary> per_temperature;
  MetricSummary overall;
  std::string checkpoint_hash;
};

struct LearningCurve {
  std::vector<CurvePoint> points;
  bool exhausted = false;
};

/// Holdout errors of the engine's current predictions on `test` cells.
inline CurvePoint evaluate_round(const CampaignEngine& engine,
                                 const ObservationTensor& oracle,
                                 const std::vector<Cell>& test) {
  CurvePoint cp;
  cp.round = engine.state().round;
  cp.n_training = engine.training().size();
  cp.checkpoint_hash = engine.state().checkpoint_hash;
  std::map<double, std::vector<double>> by_t;
  std::vector<double> all;
  for (auto& c : test) {
    const Observation* o = oracle.find(c);
    if (!o) continue;
    double a = are_from_ln(engine.completed()(c.i, c.j, c.t).ln_d_mean, o->ln_d);
    by_t[oracle.temperatures()[c.t]].push_back(a);
    all.push_back(a);
  }
  for (auto& [t, v] : by_t) cp.per_temperature[t] = {v.size(), rmae(v), rmse(v)};
  if (!all.empty()) cp.overall = {all.size(), rmae(all), rmse(all)};
  return cp;
}

/// Oracle values for pair p at every grid temperature, in D-space.
inline std::vector<MeasuredValue> oracle_values(const ObservationTensor& oracle,
                                                const Pair& p) {
  std::vector<MeasuredValue> out;
  for (std::size_t t = 0; t < oracle.n_temps(); ++t) {
    const Observation* o = oracle.find({p.first, p.second, t});
    if (!o) throw ValidationError("oracle lacks a value for a pool candidate");
    out.push_back({oracle.temperatures()[t], std::exp(o->ln_d), o->sigma});
  }
  return out;
}

/// Pairs the oracle knows at every grid temperature.
inline std::set<Pair> complete_pairs(const ObservationTensor& oracle) {
  std::set<Pair> out;
  for (auto& p : oracle.pairs()) {
    bool all = true;
    for (std::size_t t = 0; t < oracle.n_temps() && all; ++t)
      all = oracle.find({p.first, p.second, t}) != nullptr;
    if (all) out.insert(p);
  }
  return out;
}

/// Simulated campaign: train, select, reveal all temperatures of the
/// selection from the oracle, retrain. Holdout metrics are measured on the
/// oracle cells absent from the initial training set.
inline LearningCurve simulate_campaign(const ObservationTensor& oracle,
                                       const ObservationTensor& initial,
                                       std::size_t rounds,
                                       const CampaignConfig& cfg,
                                       const DenseTensor* synthetic) {
  if (oracle.solute_ids() != initial.solute_ids() ||
      oracle.solvent_ids() != initial.solvent_ids() ||
      oracle.temperatures() != initial.temperatures())
    throw ValidationError("oracle and initial tensors must share their axes");
  std::vector<Cell> test;
  for (auto& [c, _] : oracle.entries())
    if (!initial.find(c)) test.push_back(c);

  const auto eligible = complete_pairs(oracle);
  CampaignEngine engine(initial,
                        synthetic ? std::optional<DenseTensor>(*synthetic) : std::nullopt,
                        cfg, &eligible);
  LearningCurve curve;
  engine.train();
  curve.points.push_back(evaluate_round(engine, oracle, test));
  for (std::size_t r = 0; r < rounds; ++r) {
    if (engine.state().pool.empty()) {
      curve.exhausted = true;
      break;
    }
    Pair p = engine.propose();
    engine.apply_measurements(p, oracle_values(oracle, p), false, false, "simulated");
    engine.train();
    CurvePoint cp = evaluate_round(engine, oracle, test);
    cp.selected = p;
    curve.points.push_back(std::move(cp));
  }
  return curve;
}

inline constexpr const char* kCurveHeader =
    "run,seed,round,solute_id,solvent_id,n_training,temperature_K,count,rmae,"
    "rmse,checkpoint_hash";

/// Learning-curve CSV rows: one per temperature plus an "all" row per round.
inline std::string format_curve_rows(const LearningCurve& c,
                                     const ObservationTensor& axes,
                                     std::size_t run, std::uint64_t seed) {
  std::string out;
  for (auto& p : c.points) {
    std::string head = std::to_string(run) + "," + std::to_string(seed) + "," +
                       std::to_string(p.round) + ",";
    head += p.selected ? std::to_string(axes.solute_ids()[p.selected->first]) +
                             "," +
                             std::to_string(axes.solvent_ids()[p.selected->second])
                       : std::string(",");
    head += "," + std::to_string(p.n_training) + ",";
    auto row = [&](const std::string& t, const MetricSummary& m) {
      out += head + t + "," + std::to_string(m.count) + "," + format_double(m.rmae) +
             "," + format_double(m.rmse) + "," + p.checkpoint_hash + "\n";
    };
    for (auto& [t, m] : p.per_temperature) row(format_double(t), m);
    row("all", p.overall);
  }
  return out;
}

}  // namespace difftensor
