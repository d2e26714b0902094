#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "difftensor/error.hpp"
#include "difftensor/util.hpp"

namespace difftensor::nmr {

inline constexpr double kProtonGyromagneticRatio = 2.67522e8;  // rad/(s T)

/// Two-sided 95 % Student-t quantile.
inline double t_quantile_95(std::size_t dof) {
  if (dof < 1) throw DomainError("t quantile needs at least one degree of freedom");
  boost::math::students_t dist(static_cast<double>(dof));
  return boost::math::quantile(dist, 0.975);
}

struct AttenuationSeries {
  std::vector<double> gradients;  // g, T/m
  std::vector<double> ratios;     // I / I0
  double delta = 0;               // gradient pulse duration, s
  double big_delta = 0;           // diffusion time, s
  double tau = 0;                 // bipolar gradient correction, s
  double gamma = kProtonGyromagneticRatio;

  /// gamma^2 delta^2 (Delta - delta/3 - tau/2)
  double attenuation_factor() const {
    return gamma * gamma * delta * delta * (big_delta - delta / 3.0 - tau / 2.0);
  }

  /// Series from raw intensities, normalized to the one at the lowest g.
  static AttenuationSeries from_intensities(std::vector<double> g,
                                            const std::vector<double>& intensity,
                                            double delta, double big_delta,
                                            double tau,
                                            double gamma = kProtonGyromagneticRatio) {
    if (g.empty() || g.size() != intensity.size())
      throw ValidationError("gradient and intensity lists must match");
    std::size_t ref = static_cast<std::size_t>(
        std::min_element(g.begin(), g.end()) - g.begin());
    AttenuationSeries s;
    s.gradients = std::move(g);
    for (double v : intensity) s.ratios.push_back(v / intensity[ref]);
    s.delta = delta;
    s.big_delta = big_delta;
    s.tau = tau;
    s.gamma = gamma;
    return s;
  }

  void validate() const {
    if (gradients.size() != ratios.size())
      throw ValidationError("gradient and ratio lists differ in length");
    if (gradients.size() < 2)
      throw ValidationError("insufficient data: at least two gradient steps needed");
    if (!(delta > 0 && big_delta > 0 && tau >= 0 && gamma > 0))
      throw ValidationError("pulse parameters must be positive");
    if (!(big_delta - delta / 3.0 - tau / 2.0 > 0))
      throw ValidationError("Delta - delta/3 - tau/2 must be positive");
    for (double r : ratios)
      if (!(r > 0)) throw ValidationError("intensity ratios must be positive");
  }
};

/// Forward model I/I0 = exp(-D k g^2).
inline AttenuationSeries simulate_attenuation(double d, std::vector<double> g,
                                              double delta, double big_delta,
                                              double tau,
                                              double gamma = kProtonGyromagneticRatio) {
  AttenuationSeries s;
  s.delta = delta;
  s.big_delta = big_delta;
  s.tau = tau;
  s.gamma = gamma;
  const double k = s.attenuation_factor();
  for (double x : g) s.ratios.push_back(std::exp(-d * k * x * x));
  s.gradients = std::move(g);
  return s;
}

struct StejskalFit {
  double d = 0;            // m^2/s
  double sigma_d = 0;      // 95 % t half-width
  double residual_rms = 0; // ln-space
  double slope = 0;        // d ln(I/I0) / d g^2
  bool ratio_above_one = false;
};

/// Least squares of ln(I/I0) on g^2 through the origin.
inline StejskalFit stejskal_fit(const AttenuationSeries& s) {
  s.validate();
  const std::size_t n = s.gradients.size();
  double sxx = 0, sxy = 0;
  bool above = false;
  for (std::size_t k = 0; k < n; ++k) {
    double x = s.gradients[k] * s.gradients[k];
    double y = std::log(s.ratios[k]);
    sxx += x * x;
    sxy += x * y;
    above = above || s.ratios[k] > 1.0;
  }
  if (!(sxx > 0)) throw FitError("all gradient strengths are zero");
  StejskalFit f;
  f.slope = sxy / sxx;
  if (f.slope > 0)
    throw FitError("attenuation increases with gradient strength (negative D)");
  double ss = 0;
  for (std::size_t k = 0; k < n; ++k) {
    double x = s.gradients[k] * s.gradients[k];
    double r = std::log(s.ratios[k]) - f.slope * x;
    ss += r * r;
  }
  const double factor = s.attenuation_factor();
  f.d = f.slope == 0.0 ? 0.0 : -f.slope / factor;
  f.residual_rms = std::sqrt(ss / static_cast<double>(n));
  const std::size_t dof = n - 1;
  const double slope_se = std::sqrt(ss / static_cast<double>(dof) / sxx);
  f.sigma_d = t_quantile_95(dof) * slope_se / factor;
  f.ratio_above_one = above;
  return f;
}

/// Arithmetic mean of per-peak fits; stds combined as for a mean of
/// independent values.
inline StejskalFit average_peaks(const std::vector<StejskalFit>& peaks) {
  if (peaks.empty()) throw ValidationError("no peaks to average");
  StejskalFit out;
  double var = 0;
  for (auto& p : peaks) {
    out.d += p.d;
    out.residual_rms += p.residual_rms;
    out.slope += p.slope;
    var += p.sigma_d * p.sigma_d;
    out.ratio_above_one = out.ratio_above_one || p.ratio_above_one;
  }
  const double n = static_cast<double>(peaks.size());
  out.d /= n;
  out.residual_rms /= n;
  out.slope /= n;
  out.sigma_d = std::sqrt(var) / n;
  return out;
}

struct DilutionSeries {
  std::vector<double> concentrations;  // mol/mol
  std::vector<double> d;               // m^2/s
  std::vector<double> sigma;           // per-point std; empty when unknown
  double temperature = 0;

  void validate() const {
    if (concentrations.size() < 2)
      throw ValidationError("dilution series needs at least two concentrations");
    if (d.size() != concentrations.size() ||
        (!sigma.empty() && sigma.size() != d.size()))
      throw ValidationError("dilution series lists differ in length");
    for (double c : concentrations)
      if (!(c > 0)) throw ValidationError("concentrations must be positive");
  }
};

struct InfiniteDilution {
  double d_inf = 0;
  double sigma_inf = 0;  // 95 % t half-width
  double slope = 0;
  bool weighted = false;
};

/// Linear fit of D against concentration; the intercept is D at infinite
/// dilution. The intercept variance sums the propagated per-point
/// uncertainty and the residual scatter term, then takes a 95 % t interval
/// with max(n - 2, 1) degrees of freedom.
inline InfiniteDilution extrapolate_infinite_dilution(const DilutionSeries& s,
                                                      bool use_weights = true) {
  s.validate();
  const std::size_t n = s.concentrations.size();
  {
    std::set<double> distinct(s.concentrations.begin(), s.concentrations.end());
    if (distinct.size() != n)
      throw FitError("duplicate concentrations make the extrapolation singular");
  }
  bool weighted = use_weights && !s.sigma.empty() &&
                  std::all_of(s.sigma.begin(), s.sigma.end(),
                              [](double v) { return v > 0; });
  std::vector<double> w(n, 1.0);
  if (weighted)
    for (std::size_t k = 0; k < n; ++k) w[k] = 1.0 / (s.sigma[k] * s.sigma[k]);

  double sw = 0, swx = 0, swy = 0;
  for (std::size_t k = 0; k < n; ++k) {
    sw += w[k];
    swx += w[k] * s.concentrations[k];
    swy += w[k] * s.d[k];
  }
  const double mx = swx / sw, my = swy / sw;
  double sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < n; ++k) {
    double dx = s.concentrations[k] - mx;
    sxx += w[k] * dx * dx;
    sxy += w[k] * dx * (s.d[k] - my);
  }
  if (!(sxx > 0)) throw FitError("singular extrapolation (degenerate concentrations)");
  InfiniteDilution out;
  out.slope = sxy / sxx;
  out.d_inf = my - out.slope * mx;
  out.weighted = weighted;

  // intercept = sum_k a_k D_k with a_k = w_k (1/sw - mx (x_k - mx)/sxx)
  double var_prop = 0, ss_res = 0;
  for (std::size_t k = 0; k < n; ++k) {
    double a = w[k] * (1.0 / sw - mx * (s.concentrations[k] - mx) / sxx);
    if (!s.sigma.empty()) var_prop += a * a * s.sigma[k] * s.sigma[k];
    double r = s.d[k] - (out.d_inf + out.slope * s.concentrations[k]);
    ss_res += w[k] * r * r;
  }
  double var_extrap = 0;
  if (n > 2) {
    double leverage = 1.0 / sw + mx * mx / sxx;
    var_extrap = ss_res / static_cast<double>(n - 2) * leverage;
  }
  const std::size_t dof = n > 2 ? n - 2 : 1;
  out.sigma_inf = t_quantile_95(dof) * std::sqrt(var_prop + var_extrap);
  return out;
}

/// "4.064 ± 0.025" in units of 1e-9 m^2/s with three decimals.
inline std::string format_table_value(double d, double sigma) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f \xC2\xB1 %.3f", d * 1e9, sigma * 1e9);
  return buf;
}

inline std::pair<double, double> parse_table_value(std::string_view s) {
  auto pos = s.find("\xC2\xB1");
  std::size_t skip = 2;
  if (pos == std::string_view::npos) {
    pos = s.find("+-");
    skip = 2;
  }
  if (pos == std::string_view::npos) throw ParseError("expected 'value ± sigma'");
  double v = parse_double(s.substr(0, pos), 0, "value");
  double e = parse_double(s.substr(pos + skip), 0, "sigma");
  return {v * 1e-9, e * 1e-9};
}

}  // namespace difftensor::nmr
