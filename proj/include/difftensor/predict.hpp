#pragma once

#include <cmath>

#include "difftensor/checkpoint.hpp"
#include "difftensor/error.hpp"
#include "difftensor/factor_models.hpp"
#include "difftensor/temperature.hpp"

namespace difftensor {

struct PointPrediction {
  double temperature = 0;
  double ln_d_mean = 0, ln_d_std = 0;
  bool on_grid = false;

  double d_mean() const { return std::exp(ln_d_mean); }
  /// 95 % interval of D from the ln-space normal approximation.
  std::pair<double, double> interval95() const {
    return {std::exp(ln_d_mean - 1.959963984540054 * ln_d_std),
            std::exp(ln_d_mean + 1.959963984540054 * ln_d_std)};
  }
};

inline constexpr double kGridMatchTolerance = 1e-6;  // K

/// Prediction for one system from a checkpoint. Grid temperatures use the
/// trained slab directly; other temperatures go through the linear
/// temperature model of W and are range-checked.
inline PointPrediction predict_point(const Checkpoint& c, int solute_id,
                                     int solvent_id, double temperature,
                                     bool allow_extrapolation = false,
                                     std::size_t n_samples = kDefaultPredictionSamples,
                                     std::uint64_t seed = kDefaultPredictionSeed) {
  auto i = c.solute_index(solute_id);
  auto j = c.solvent_index(solvent_id);
  if (!i) throw ValidationError("solute " + std::to_string(solute_id) +
                                " is not in the checkpoint");
  if (!j) throw ValidationError("solvent " + std::to_string(solvent_id) +
                                " is not in the checkpoint");
  std::optional<std::size_t> slab;
  for (std::size_t t = 0; t < c.temperatures.size(); ++t)
    if (std::abs(c.temperatures[t] - temperature) <= kGridMatchTolerance) slab = t;

  PointPrediction out;
  out.temperature = temperature;
  PredictionDistribution d;
  if (c.kind() == ModelKind::mcm) {
    if (!slab)
      throw RangeError("an MCM checkpoint only predicts at its training "
                       "temperature " + format_double(c.temperatures.at(0)) + " K");
    d = mcm_reconstruct(c.mcm(), *i, *j, n_samples, seed);
  } else if (slab) {
    d = tcm_reconstruct(c.tcm(), *i, *j, *slab, n_samples, seed);
  } else {
    if (c.temperatures.size() < 2)
      throw ValidationError("off-grid prediction needs at least two trained "
                            "temperatures");
    auto lin = fit_w_linear(c.tcm(), c.temperatures);
    d = predict_at_temperature(c.tcm(), lin, *i, *j, temperature, n_samples,
                               seed, allow_extrapolation);
  }
  out.ln_d_mean = d.ln_d_mean;
  out.ln_d_std = d.ln_d_std;
  out.on_grid = slab.has_value();
  return out;
}

}  // namespace difftensor
