#pragma once

// Low-rank synthetic diffusion data for tests: a rank-(2,2,2) Tucker tensor
// in ln-space, sparse Cauchy-noised observations and a distorted prior tensor.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <vector>

#include "difftensor/data_model.hpp"
#include "difftensor/util.hpp"

namespace difftensor::testing {

struct SyntheticSpec {
  std::size_t n_solutes = 20, n_solvents = 15;
  std::vector<double> temperatures = {298.0, 313.0, 333.0};
  double occupancy = 0.10;
  double noise_scale = 0.05;  // Cauchy lambda in ln-space
  double core_scale = 0.25;
  double prior_bias = 0.0;         // constant ln-space shift of the prior
  double prior_distortion = 0.2;   // per-solvent systematic error
  double ln_level = std::log(1e-9);
};

struct SyntheticProblem {
  std::shared_ptr<const ComponentRegistry> registry;
  DenseTensor truth;     // noiseless ln D
  DenseTensor prior;     // biased but correlated ln D
  ObservationTensor observed;
};

inline std::shared_ptr<const ComponentRegistry> synthetic_registry(
    std::size_t n_solutes, std::size_t n_solvents) {
  auto reg = std::make_shared<ComponentRegistry>();
  for (std::size_t i = 0; i < n_solutes; ++i)
    reg->add({static_cast<int>(i + 1), "solute" + std::to_string(i + 1), "",
              50.0 + 5.0 * static_cast<double>(i), Role::solute, std::nullopt});
  for (std::size_t j = 0; j < n_solvents; ++j)
    reg->add({static_cast<int>(1001 + j), "solvent" + std::to_string(j + 1), "",
              60.0 + 4.0 * static_cast<double>(j), Role::solvent,
              ViscosityCorrelation{-52.843, 3703.6, 5.866, -5.879e-29, 10.0,
                                   273.16, 646.15}});
  return reg;
}

/// Tucker truth with factor matrices [1, x] so that subtracting any constant
/// keeps the multilinear rank; w is linear in temperature.
inline DenseTensor tucker_truth(const SyntheticSpec& s, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> a(s.n_solutes), b(s.n_solvents), c(s.temperatures.size());
  for (auto& x : a) x = nd(rng);
  for (auto& x : b) x = nd(rng);
  for (std::size_t t = 0; t < c.size(); ++t) c[t] = (s.temperatures[t] - 313.0) / 20.0;
  double core[2][2][2];
  for (auto& p : core)
    for (auto& q : p)
      for (auto& r : q) r = s.core_scale * nd(rng);
  core[0][0][0] = 0.0;
  DenseTensor out(s.n_solutes, s.n_solvents, s.temperatures.size());
  for (std::size_t i = 0; i < s.n_solutes; ++i)
    for (std::size_t j = 0; j < s.n_solvents; ++j)
      for (std::size_t t = 0; t < c.size(); ++t) {
        const double u[2] = {1.0, a[i]}, v[2] = {1.0, b[j]}, w[2] = {1.0, c[t]};
        double f = 0;
        for (int p = 0; p < 2; ++p)
          for (int q = 0; q < 2; ++q)
            for (int r = 0; r < 2; ++r) f += core[p][q][r] * u[p] * v[q] * w[r];
        out(i, j, t) = s.ln_level + f;
      }
  return out;
}

inline double cauchy_draw(std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  return scale * std::tan(std::numbers::pi * (ud(rng) - 0.5));
}

inline SyntheticProblem make_synthetic(const SyntheticSpec& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SyntheticProblem p;
  p.registry = synthetic_registry(s.n_solutes, s.n_solvents);
  p.truth = tucker_truth(s, rng);

  std::normal_distribution<double> nd;
  std::vector<double> solvent_err(s.n_solvents);
  for (auto& e : solvent_err) e = s.prior_distortion * nd(rng);
  p.prior = p.truth;
  for (std::size_t i = 0; i < s.n_solutes; ++i)
    for (std::size_t j = 0; j < s.n_solvents; ++j)
      for (std::size_t t = 0; t < p.truth.n_temps; ++t)
        p.prior(i, j, t) += s.prior_bias + solvent_err[j];

  p.observed = ObservationTensor::spanning(p.registry, s.temperatures);
  const std::size_t n_cells = p.truth.size();
  const std::size_t n_obs =
      static_cast<std::size_t>(std::llround(s.occupancy * static_cast<double>(n_cells)));
  std::vector<std::size_t> order(n_cells);
  for (std::size_t k = 0; k < n_cells; ++k) order[k] = k;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t n = 0; n < n_obs; ++n) {
    std::size_t k = order[n];
    std::size_t t = k % p.truth.n_temps;
    std::size_t j = (k / p.truth.n_temps) % s.n_solvents;
    std::size_t i = k / (p.truth.n_temps * s.n_solvents);
    Observation o;
    o.solute_id = p.observed.solute_ids()[i];
    o.solvent_id = p.observed.solvent_ids()[j];
    o.temperature = s.temperatures[t];
    o.ln_d = p.truth(i, j, t) + cauchy_draw(rng, s.noise_scale);
    o.source = "synthetic";
    p.observed.set({i, j, t}, o);
  }
  return p;
}

}  // namespace difftensor::testing
