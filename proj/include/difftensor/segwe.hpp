#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "difftensor/data_model.hpp"
#include "difftensor/error.hpp"

namespace difftensor::segwe {

inline constexpr double kBoltzmann = 1.380649e-23;   // J/K
inline constexpr double kAvogadro = 6.02214076e23;   // 1/mol
inline constexpr double kDefaultEffectiveDensity = 627.0;  // kg/m^3

struct SegweInput {
  double solute_mw = 0;   // g/mol
  double solvent_mw = 0;  // g/mol
  double eta = 0;         // Pa s
  double temperature = 0; // K
  double rho_eff = kDefaultEffectiveDensity;
};

/// DIPPR-101 liquid viscosity in Pa s.
inline double viscosity(const ViscosityCorrelation& v, double temperature) {
  if (!(temperature >= v.t_min && temperature <= v.t_max))
    throw RangeError("temperature " + format_double(temperature) +
                     " K outside viscosity validity range [" +
                     format_double(v.t_min) + ", " + format_double(v.t_max) +
                     "] K");
  double eta = std::exp(v.a + v.b / temperature + v.c * std::log(temperature) +
                        v.d * std::pow(temperature, v.e));
  if (!(eta > 0) || !std::isfinite(eta))
    throw NumericalError("viscosity correlation produced a non-positive value");
  return eta;
}

inline double viscosity(const Component& solvent, double temperature) {
  if (!solvent.viscosity)
    throw ConfigurationError("component " + std::to_string(solvent.id) +
                             " has no viscosity coefficients");
  try {
    return viscosity(*solvent.viscosity, temperature);
  } catch (const RangeError& e) {
    throw RangeError("solvent " + std::to_string(solvent.id) + " (" +
                     solvent.name + "): " + e.what());
  }
}

/// Hydrodynamic radius of the solute, m.
inline double solute_radius(double solute_mw, double rho_eff) {
  double mass_kg = solute_mw * 1e-3;
  return std::cbrt(3.0 * mass_kg / (4.0 * std::numbers::pi * rho_eff * kAvogadro));
}

/// Stokes-Einstein with the Gierer-Wirtz microfriction factor; m^2/s.
inline double segwe_d(const SegweInput& in) {
  if (!(in.solute_mw > 0 && in.solvent_mw > 0 && in.eta > 0 &&
        in.temperature > 0 && in.rho_eff > 0))
    throw DomainError("SEGWE inputs must all be strictly positive");
  double r_s = solute_radius(in.solute_mw, in.rho_eff);
  double alpha = std::cbrt(in.solvent_mw / in.solute_mw);
  double friction = 1.0 / (1.5 * alpha + 1.0 / (1.0 + alpha));
  return kBoltzmann * in.temperature /
         (6.0 * std::numbers::pi * in.eta * friction * r_s);
}

/// Dense ln D^SEGWE over the given axes.
inline DenseTensor synthetic_tensor(const ComponentRegistry& reg,
                                    const std::vector<int>& solute_ids,
                                    const std::vector<int>& solvent_ids,
                                    const std::vector<double>& temperatures,
                                    double rho_eff = kDefaultEffectiveDensity) {
  DenseTensor out(solute_ids.size(), solvent_ids.size(), temperatures.size());
  for (std::size_t j = 0; j < solvent_ids.size(); ++j) {
    const Component& solvent = reg.at(solvent_ids[j]);
    for (std::size_t t = 0; t < temperatures.size(); ++t) {
      double eta = viscosity(solvent, temperatures[t]);
      for (std::size_t i = 0; i < solute_ids.size(); ++i) {
        const Component& solute = reg.at(solute_ids[i]);
        out(i, j, t) = std::log(segwe_d({solute.molar_mass, solvent.molar_mass,
                                         eta, temperatures[t], rho_eff}));
      }
    }
  }
  return out;
}

inline DenseTensor synthetic_tensor(const ObservationTensor& tensor,
                                    double rho_eff = kDefaultEffectiveDensity) {
  return synthetic_tensor(*tensor.registry(), tensor.solute_ids(),
                          tensor.solvent_ids(), tensor.temperatures(), rho_eff);
}

/// SEGWE prediction for one observation's system at its own temperature.
inline double predict_ln_d(const ComponentRegistry& reg, int solute_id,
                           int solvent_id, double temperature,
                           double rho_eff = kDefaultEffectiveDensity) {
  const Component& su = reg.at(solute_id);
  const Component& sv = reg.at(solvent_id);
  return std::log(segwe_d({su.molar_mass, sv.molar_mass,
                           viscosity(sv, temperature), temperature, rho_eff}));
}

}  // namespace difftensor::segwe
