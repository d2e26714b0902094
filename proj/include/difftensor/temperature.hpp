#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "difftensor/error.hpp"
#include "difftensor/factor_models.hpp"
#include "difftensor/util.hpp"

namespace difftensor {

inline constexpr double kValidatedTLow = 268.0;
inline constexpr double kValidatedTHigh = 378.0;

/// w_gamma(T) = intercept + slope * T with fit diagnostics.
struct LinearFeature {
  double intercept = 0;  // A_gamma
  double slope = 0;      // B_gamma, 1/K
  double r_squared = 0;
  double mse = 0;

  double at(double temperature) const { return intercept + slope * temperature; }
};

struct LinearWModel {
  std::vector<LinearFeature> dims;
  std::vector<double> w_std;  // per-dimension mean of on-grid w stds
  double t_lo = kValidatedTLow;
  double t_hi = kValidatedTHigh;
};

/// Unweighted least squares of one column against temperature.
inline LinearFeature fit_line(const std::vector<double>& temperatures,
                              const std::vector<double>& values) {
  const std::size_t n = temperatures.size();
  if (n < 2 || values.size() != n)
    throw ValidationError("linear temperature fit needs at least two points");
  double tx = 0, ty = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tx += temperatures[k];
    ty += values[k];
  }
  const double mx = tx / n, my = ty / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t k = 0; k < n; ++k) {
    double dx = temperatures[k] - mx, dy = values[k] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (!(sxx > 0))
    throw FitError("temperature grid is degenerate (all temperatures equal)");
  LinearFeature f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t k = 0; k < n; ++k) {
    double r = values[k] - f.at(temperatures[k]);
    ss_res += r * r;
  }
  f.mse = ss_res / n;
  f.r_squared = syy > 0 ? 1.0 - ss_res / syy : 1.0;
  return f;
}

/// Fits each column of the n_temps x r_w matrix of feature means.
inline LinearWModel fit_w_linear(const std::vector<std::vector<double>>& w_means,
                                 const std::vector<double>& temperatures) {
  if (temperatures.size() < 2)
    throw ValidationError("linear temperature fit needs at least two temperatures");
  if (w_means.size() != temperatures.size())
    throw ValidationError("W row count must equal the temperature-grid length");
  const std::size_t rw = w_means.front().size();
  LinearWModel m;
  for (std::size_t c = 0; c < rw; ++c) {
    std::vector<double> col;
    for (auto& row : w_means) col.push_back(row.at(c));
    m.dims.push_back(fit_line(temperatures, col));
  }
  m.w_std.assign(rw, 0.0);
  return m;
}

/// Fit from a trained factor set; also records the mean on-grid w stds.
inline LinearWModel fit_w_linear(const TcmFactors& f,
                                 const std::vector<double>& temperatures) {
  const auto& s = f.shape;
  if (temperatures.size() != s.n_temps())
    throw ValidationError("W row count must equal the temperature-grid length");
  std::vector<std::vector<double>> w(s.n_temps(), std::vector<double>(s.ranks.w));
  std::vector<double> stds(s.ranks.w, 0.0);
  for (std::size_t t = 0; t < s.n_temps(); ++t)
    for (std::size_t c = 0; c < s.ranks.w; ++c) {
      w[t][c] = f.params[s.w(t, c)].mean;
      stds[c] += f.params[s.w(t, c)].std / static_cast<double>(s.n_temps());
    }
  LinearWModel m = fit_w_linear(w, temperatures);
  m.w_std = std::move(stds);
  return m;
}

/// Single-slab factor set whose temperature features are the linear model
/// evaluated at `temperature`.
inline TcmFactors factors_at_temperature(const TcmFactors& f,
                                         const LinearWModel& lin,
                                         double temperature) {
  const auto& s = f.shape;
  if (lin.dims.size() != s.ranks.w)
    throw ValidationError("linear model dimension does not match r_w");
  TcmShape one = s;
  one.n_temps_ = 1;
  TcmFactors out(one);
  out.offset = f.offset;
  for (std::size_t i = 0; i < s.n_solutes; ++i)
    for (std::size_t a = 0; a < s.ranks.u; ++a)
      out.params[one.u(i, a)] = f.params[s.u(i, a)];
  for (std::size_t j = 0; j < s.n_solvents; ++j)
    for (std::size_t b = 0; b < s.ranks.v; ++b)
      out.params[one.v(j, b)] = f.params[s.v(j, b)];
  for (std::size_t c = 0; c < s.ranks.w; ++c)
    out.params[one.w(0, c)] = {lin.dims[c].at(temperature),
                               c < lin.w_std.size() ? lin.w_std[c] : 0.0};
  for (std::size_t k = 0; k < s.core_size(); ++k)
    out.params[one.core(0, 0, 0) + k] = f.params[s.core(0, 0, 0) + k];
  return out;
}

inline void check_validated_range(const LinearWModel& lin, double temperature,
                                  bool allow_extrapolation) {
  if (!allow_extrapolation &&
      !(temperature >= lin.t_lo && temperature <= lin.t_hi))
    throw RangeError("temperature " + format_double(temperature) +
                     " K outside the validated interval [" +
                     format_double(lin.t_lo) + ", " + format_double(lin.t_hi) +
                     "] K; pass --allow-extrapolation to override");
}

inline PredictionDistribution predict_at_temperature(
    const TcmFactors& f, const LinearWModel& lin, std::size_t i, std::size_t j,
    double temperature, std::size_t n_samples = kDefaultPredictionSamples,
    std::uint64_t seed = kDefaultPredictionSeed,
    bool allow_extrapolation = false) {
  check_validated_range(lin, temperature, allow_extrapolation);
  return tcm_reconstruct(factors_at_temperature(f, lin, temperature), i, j, 0,
                         n_samples, seed);
}

/// CSV row `gamma,A,B,R2,MSE` with round-trip precision.
inline std::string format_regression_row(std::size_t gamma,
                                         const LinearFeature& f) {
  return std::to_string(gamma) + "," + format_double(f.intercept) + "," +
         format_double(f.slope) + "," + format_double(f.r_squared) + "," +
         format_double(f.mse);
}

inline std::pair<std::size_t, LinearFeature> parse_regression_row(
    std::string_view row) {
  auto f = split_csv_line(row);
  if (f.size() != 5) throw ParseError("regression row needs 5 fields");
  LinearFeature lf;
  std::size_t gamma = static_cast<std::size_t>(parse_int(f[0], 0, "gamma"));
  lf.intercept = parse_double(f[1], 0, "A");
  lf.slope = parse_double(f[2], 0, "B");
  lf.r_squared = parse_double(f[3], 0, "R2");
  lf.mse = parse_double(f[4], 0, "MSE");
  return {gamma, lf};
}

}  // namespace difftensor
