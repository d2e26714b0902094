#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "difftensor/bayes.hpp"
#include "difftensor/data_model.hpp"
#include "difftensor/error.hpp"
#include "difftensor/factor_models.hpp"
#include "difftensor/parallel.hpp"
#include "difftensor/segwe.hpp"
#include "difftensor/temperature.hpp"

namespace difftensor {

/// Absolute relative error in D-space.
inline double are(double pred, double exp) {
  if (exp == 0.0) throw DomainError("ARE undefined for an experimental value of 0");
  return std::abs((pred - exp) / exp);
}

inline double are_from_ln(double pred_ln, double exp_ln) {
  return are(std::exp(pred_ln), std::exp(exp_ln));
}

inline double rmae(std::span<const double> ares) {
  if (ares.empty()) throw DomainError("rMAE of an empty point set");
  double s = 0;
  for (double a : ares) s += a;
  return s / static_cast<double>(ares.size());
}

inline double rmse(std::span<const double> ares) {
  if (ares.empty()) throw DomainError("rMSE of an empty point set");
  double s = 0;
  for (double a : ares) s += a * a;
  return s / static_cast<double>(ares.size());
}

struct FoldPoint {
  std::size_t t = 0;
  double temperature = 0;
  double pred_ln = 0;
  double pred_std = 0;
  double exp_ln = 0;
  double are = 0;
  std::optional<double> baseline_ln;  // SEGWE at the same cell
};

struct FoldResult {
  std::size_t i = 0, j = 0;
  int solute_id = 0, solvent_id = 0;
  std::vector<FoldPoint> points;
  bool prior_only = false;  // solute or solvent absent from the training data
};

struct LooConfig {
  HybridConfig hybrid;            // hybrid.train.seed is the master seed
  TuckerRanks ranks;
  std::size_t mcm_rank = 2;
  std::size_t n_samples = kDefaultPredictionSamples;
  std::uint64_t prediction_seed = kDefaultPredictionSeed;
  std::size_t jobs = 1;
};

/// Training tensor for the fold that withholds pair (i, j) at every
/// temperature.
inline ObservationTensor loo_training_set(const ObservationTensor& tensor,
                                          const Pair& held_out) {
  ObservationTensor train = tensor;
  train.erase_pair(held_out.first, held_out.second);
  train.continuous().clear();
  return train;
}

inline bool has_solute(const Dataset& d, std::size_t i) {
  return std::any_of(d.begin(), d.end(), [&](auto& p) { return p.cell.i == i; });
}
inline bool has_solvent(const Dataset& d, std::size_t j) {
  return std::any_of(d.begin(), d.end(), [&](auto& p) { return p.cell.j == j; });
}

namespace detail {

inline Dataset slab_of(const DenseTensor& t, std::size_t slab) {
  Dataset d;
  for (std::size_t i = 0; i < t.n_solutes; ++i)
    for (std::size_t j = 0; j < t.n_solvents; ++j)
      d.push_back({{i, j, 0}, t(i, j, slab)});
  return d;
}

}  // namespace detail

/// Isothermal LOO: one fold per observed cell of slab `slab`.
inline std::vector<FoldResult> loo_mcm(const ObservationTensor& tensor,
                                       std::size_t slab,
                                       const DenseTensor* synthetic,
                                       const LooConfig& cfg) {
  if (slab >= tensor.n_temps()) throw RangeError("slab index out of range");
  McmShape shape{tensor.n_solutes(), tensor.n_solvents(), cfg.mcm_rank};
  Dataset full = to_dataset(tensor, slab);
  Dataset syn = synthetic ? detail::slab_of(*synthetic, slab) : Dataset{};
  HybridConfig hc = cfg.hybrid;
  hc.use_synthetic = hc.use_synthetic && synthetic != nullptr;
  const double offset = training_offset(hc, syn, full);
  std::optional<McmFactors> pre;
  if (hc.use_synthetic) pre = pretrain(shape, syn, hc, offset).factors;

  std::vector<FoldResult> out(full.size());
  parallel_for(full.size(), cfg.jobs, [&](std::size_t k) {
    const Cell held = full[k].cell;
    Dataset train;
    for (auto& p : full)
      if (!(p.cell.i == held.i && p.cell.j == held.j)) train.push_back(p);
    if (train.size() + 1 != full.size())
      throw ValidationError("MCM fold training set contains the held-out cell");
    HybridConfig fc = hc;
    fc.train.seed = derive_seed(hc.train.seed, k + 1);
    auto r = finetune(shape, pre, train, fc, offset);
    auto pred = mcm_reconstruct(r.factors, held.i, held.j, cfg.n_samples,
                                cfg.prediction_seed);
    FoldResult f;
    f.i = held.i;
    f.j = held.j;
    f.solute_id = tensor.solute_ids()[held.i];
    f.solvent_id = tensor.solvent_ids()[held.j];
    f.prior_only = !has_solute(train, held.i) || !has_solvent(train, held.j);
    FoldPoint pt;
    pt.t = slab;
    pt.temperature = tensor.temperatures()[slab];
    pt.pred_ln = pred.ln_d_mean;
    pt.pred_std = pred.ln_d_std;
    pt.exp_ln = full[k].ln_d;
    pt.are = are_from_ln(pt.pred_ln, pt.exp_ln);
    if (synthetic) pt.baseline_ln = (*synthetic)(held.i, held.j, slab);
    f.points.push_back(pt);
    out[k] = std::move(f);
  });
  return out;
}

/// System-wise LOO over all temperatures: one fold per distinct observed
/// pair, withheld at every temperature and predicted at each observed one.
inline std::vector<FoldResult> loo_tcm(const ObservationTensor& tensor,
                                       const DenseTensor* synthetic,
                                       const LooConfig& cfg) {
  if (tensor.empty()) throw ValidationError("LOO needs a non-empty tensor");
  TcmShape shape{tensor.n_solutes(), tensor.n_solvents(), tensor.n_temps(),
                 cfg.ranks};
  Dataset full = to_dataset(tensor);
  Dataset syn = synthetic ? to_dataset(*synthetic) : Dataset{};
  HybridConfig hc = cfg.hybrid;
  hc.use_synthetic = hc.use_synthetic && synthetic != nullptr;
  const double offset = training_offset(hc, syn, full);
  std::optional<TcmFactors> pre;
  if (hc.use_synthetic) pre = pretrain(shape, syn, hc, offset).factors;

  const auto pair_set = tensor.pairs();
  const std::vector<Pair> pairs(pair_set.begin(), pair_set.end());
  std::vector<FoldResult> out(pairs.size());
  parallel_for(pairs.size(), cfg.jobs, [&](std::size_t k) {
    const Pair held = pairs[k];
    Dataset train = to_dataset(loo_training_set(tensor, held));
    for (auto& p : train)
      if (p.cell.i == held.first && p.cell.j == held.second)
        throw ValidationError("TCM fold training set contains the held-out pair");
    HybridConfig fc = hc;
    fc.train.seed = derive_seed(hc.train.seed, k + 1);
    auto r = finetune(shape, pre, train, fc, offset);
    FoldResult f;
    f.i = held.first;
    f.j = held.second;
    f.solute_id = tensor.solute_ids()[held.first];
    f.solvent_id = tensor.solvent_ids()[held.second];
    f.prior_only = !has_solute(train, held.first) || !has_solvent(train, held.second);
    for (std::size_t t = 0; t < tensor.n_temps(); ++t) {
      const Observation* o = tensor.find({held.first, held.second, t});
      if (!o) continue;
      auto pred = tcm_reconstruct(r.factors, held.first, held.second, t,
                                  cfg.n_samples, cfg.prediction_seed);
      FoldPoint pt;
      pt.t = t;
      pt.temperature = tensor.temperatures()[t];
      pt.pred_ln = pred.ln_d_mean;
      pt.pred_std = pred.ln_d_std;
      pt.exp_ln = o->ln_d;
      pt.are = are_from_ln(pt.pred_ln, pt.exp_ln);
      if (synthetic) pt.baseline_ln = (*synthetic)(held.first, held.second, t);
      f.points.push_back(pt);
    }
    out[k] = std::move(f);
  });
  return out;
}

struct MetricSummary {
  std::size_t count = 0;
  double rmae = 0, rmse = 0;
};

struct LooSummary {
  std::map<double, MetricSummary> per_temperature;
  MetricSummary overall;
  std::optional<MetricSummary> baseline_overall;  // SEGWE on the same points
  std::map<double, MetricSummary> baseline_per_temperature;
  std::size_t folds = 0;
  std::size_t prior_only_folds = 0;
};

/// Aggregates with equal weight per data point.
inline LooSummary summarize(const std::vector<FoldResult>& folds) {
  std::map<double, std::vector<double>> by_t, base_by_t;
  std::vector<double> all, base_all;
  LooSummary s;
  s.folds = folds.size();
  for (auto& f : folds) {
    s.prior_only_folds += f.prior_only;
    for (auto& p : f.points) {
      by_t[p.temperature].push_back(p.are);
      all.push_back(p.are);
      if (p.baseline_ln) {
        double b = are_from_ln(*p.baseline_ln, p.exp_ln);
        base_by_t[p.temperature].push_back(b);
        base_all.push_back(b);
      }
    }
  }
  auto metrics = [](const std::vector<double>& v) {
    return MetricSummary{v.size(), rmae(v), rmse(v)};
  };
  for (auto& [t, v] : by_t) s.per_temperature[t] = metrics(v);
  if (!all.empty()) s.overall = metrics(all);
  for (auto& [t, v] : base_by_t) s.baseline_per_temperature[t] = metrics(v);
  if (!base_all.empty()) s.baseline_overall = metrics(base_all);
  return s;
}

inline double loo_rmae(const std::vector<FoldResult>& folds) {
  std::vector<double> all;
  for (auto& f : folds)
    for (auto& p : f.points) all.push_back(p.are);
  return rmae(all);
}

/// Linear-interpolation quantile between order statistics (type 7).
inline double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw DomainError("quantile of an empty set");
  double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  std::size_t lo = static_cast<std::size_t>(std::floor(h));
  std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct BoxStats {
  double median = 0, q1 = 0, q3 = 0;
  double whisker_lo = 0, whisker_hi = 0;  // extreme points within 1.5 IQR
};

inline BoxStats box_stats(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  BoxStats b;
  b.q1 = quantile_sorted(values, 0.25);
  b.median = quantile_sorted(values, 0.5);
  b.q3 = quantile_sorted(values, 0.75);
  double iqr = b.q3 - b.q1;
  double lo_fence = b.q1 - 1.5 * iqr, hi_fence = b.q3 + 1.5 * iqr;
  b.whisker_lo = b.q1;
  b.whisker_hi = b.q3;
  for (double v : values)
    if (v >= lo_fence) {
      b.whisker_lo = std::min(v, b.q1);
      break;
    }
  for (auto it = values.rbegin(); it != values.rend(); ++it)
    if (*it <= hi_fence) {
      b.whisker_hi = std::max(*it, b.q3);
      break;
    }
  return b;
}

struct TemperatureError {
  double temperature = 0;
  double are = 0;
};

struct BinSummary {
  double lo = 0, hi = 0;
  double center() const { return 0.5 * (lo + hi); }
  std::size_t count = 0;
  std::optional<BoxStats> box;  // absent for empty bins
};

/// Half-open bins [lo, lo + width) aligned to multiples of `width`, spanning
/// every bin from the lowest to the highest occupied one.
inline std::vector<BinSummary> bin_errors(const std::vector<TemperatureError>& points,
                                          double width = 10.0) {
  if (!(width > 0)) throw ValidationError("bin width must be positive");
  std::vector<BinSummary> out;
  if (points.empty()) return out;
  std::map<long long, std::vector<double>> bins;
  for (auto& p : points)
    bins[static_cast<long long>(std::floor(p.temperature / width))].push_back(p.are);
  const long long first = bins.begin()->first, last = bins.rbegin()->first;
  for (long long k = first; k <= last; ++k) {
    BinSummary b;
    b.lo = static_cast<double>(k) * width;
    b.hi = b.lo + width;
    auto it = bins.find(k);
    if (it != bins.end()) {
      b.count = it->second.size();
      b.box = box_stats(it->second);
    }
    out.push_back(b);
  }
  return out;
}

struct ContinuousPoint {
  int solute_id = 0, solvent_id = 0;
  double temperature = 0;
  double pred_ln = 0, pred_std = 0, exp_ln = 0, are = 0;
  std::optional<double> baseline_ln;
};

/// Predicts every off-grid observation inside the validated range with the
/// linear temperature model. Points outside the range or with components
/// missing from the axes are skipped.
inline std::vector<ContinuousPoint> continuous_errors(
    const TcmFactors& f, const LinearWModel& lin, const ObservationTensor& tensor,
    std::size_t n_samples = kDefaultPredictionSamples,
    std::uint64_t seed = kDefaultPredictionSeed) {
  std::vector<ContinuousPoint> out;
  for (auto& o : tensor.continuous()) {
    if (o.temperature < lin.t_lo || o.temperature > lin.t_hi) continue;
    auto i = tensor.solute_index(o.solute_id);
    auto j = tensor.solvent_index(o.solvent_id);
    if (!i || !j) continue;
    auto pred = predict_at_temperature(f, lin, *i, *j, o.temperature, n_samples, seed);
    ContinuousPoint p{o.solute_id, o.solvent_id, o.temperature, pred.ln_d_mean,
                      pred.ln_d_std, o.ln_d, are_from_ln(pred.ln_d_mean, o.ln_d),
                      std::nullopt};
    try {
      p.baseline_ln = segwe::predict_ln_d(*tensor.registry(), o.solute_id,
                                          o.solvent_id, o.temperature);
    } catch (const Error&) {
      // outside the solvent's viscosity range: no baseline
    }
    out.push_back(p);
  }
  return out;
}

struct SweepRow {
  TuckerRanks ranks;
  double rmae = 0;
};

inline std::vector<SweepRow> hyperparameter_sweep(const ObservationTensor& tensor,
                                                  const std::vector<TuckerRanks>& grid,
                                                  const DenseTensor* synthetic,
                                                  const LooConfig& cfg) {
  if (grid.empty()) throw ValidationError("rank grid is empty");
  std::vector<SweepRow> out;
  for (auto& r : grid) {
    if (r.u < 1 || r.v < 1 || r.w < 1) throw ValidationError("ranks must be >= 1");
    LooConfig c = cfg;
    c.ranks = r;
    out.push_back({r, loo_rmae(loo_tcm(tensor, synthetic, c))});
  }
  return out;
}

inline std::string format_sweep_row(const SweepRow& r) {
  return std::to_string(r.ranks.u) + "," + std::to_string(r.ranks.v) + "," +
         std::to_string(r.ranks.w) + "," + format_double(r.rmae);
}

inline SweepRow parse_sweep_row(std::string_view line) {
  auto f = split_csv_line(line);
  if (f.size() != 4) throw ParseError("sweep row needs 4 fields");
  SweepRow r;
  r.ranks.u = static_cast<std::size_t>(parse_int(f[0], 0, "r_u"));
  r.ranks.v = static_cast<std::size_t>(parse_int(f[1], 0, "r_v"));
  r.ranks.w = static_cast<std::size_t>(parse_int(f[2], 0, "r_w"));
  r.rmae = parse_double(f[3], 0, "rmae");
  return r;
}

}  // namespace difftensor
