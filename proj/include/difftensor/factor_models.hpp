#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "difftensor/data_model.hpp"
#include "difftensor/error.hpp"
#include "difftensor/util.hpp"

namespace difftensor {

struct GaussianParam {
  double mean = 0;
  double std = 1;
  bool operator==(const GaussianParam&) const = default;
};

struct PredictionDistribution {
  double ln_d_mean = 0;
  double ln_d_std = 0;
  std::size_t i = 0, j = 0, t = 0;
};

enum class ModelKind { mcm, tcm };

inline std::string to_string(ModelKind k) {
  return k == ModelKind::mcm ? "mcm" : "tcm";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "mcm") return ModelKind::mcm;
  if (s == "tcm") return ModelKind::tcm;
  throw ValidationError("unknown model kind '" + std::string(s) + "'");
}

inline constexpr std::size_t kDefaultPredictionSamples = 1000;
inline constexpr std::uint64_t kDefaultPredictionSeed = 20251014;

/// Layout of the bilinear model ln D_ij = u_i . v_j in a flat parameter
/// vector: all of U row-major, then all of V.
struct McmShape {
  static constexpr ModelKind kind = ModelKind::mcm;
  std::size_t n_solutes = 0, n_solvents = 0, rank = 2;

  std::size_t n_temps() const { return 1; }
  std::size_t size() const { return (n_solutes + n_solvents) * rank; }
  std::size_t u(std::size_t i, std::size_t k) const { return i * rank + k; }
  std::size_t v(std::size_t j, std::size_t k) const {
    return (n_solutes + j) * rank + k;
  }

  void check(const Cell& c) const {
    if (c.i >= n_solutes || c.j >= n_solvents || c.t != 0)
      throw RangeError("MCM index out of range");
  }

  double evaluate(const double* th, const Cell& c) const {
    const double* ui = th + u(c.i, 0);
    const double* vj = th + v(c.j, 0);
    double f = 0;
    for (std::size_t k = 0; k < rank; ++k) f += ui[k] * vj[k];
    return f;
  }

  /// Evaluates f, then adds coeff(f) * df/dtheta into g. Returns f.
  template <class Coeff>
  double evaluate_and_accumulate(const double* th, const Cell& c, Coeff&& coeff,
                                 double* g) const {
    double f = evaluate(th, c);
    double s = coeff(f);
    const double* ui = th + u(c.i, 0);
    const double* vj = th + v(c.j, 0);
    double* gu = g + u(c.i, 0);
    double* gv = g + v(c.j, 0);
    for (std::size_t k = 0; k < rank; ++k) {
      gu[k] += s * vj[k];
      gv[k] += s * ui[k];
    }
    return f;
  }
};

struct TuckerRanks {
  std::size_t u = 2, v = 2, w = 2;
  bool operator==(const TuckerRanks&) const = default;
};

/// Layout of the Tucker model: U, V, W row-major, then the core
/// kappa[a][b][c] row-major.
struct TcmShape {
  static constexpr ModelKind kind = ModelKind::tcm;
  std::size_t n_solutes = 0, n_solvents = 0, n_temps_ = 0;
  TuckerRanks ranks;

  std::size_t n_temps() const { return n_temps_; }
  std::size_t core_size() const { return ranks.u * ranks.v * ranks.w; }
  std::size_t size() const {
    return n_solutes * ranks.u + n_solvents * ranks.v + n_temps_ * ranks.w +
           core_size();
  }
  std::size_t u(std::size_t i, std::size_t a) const { return i * ranks.u + a; }
  std::size_t v(std::size_t j, std::size_t b) const {
    return n_solutes * ranks.u + j * ranks.v + b;
  }
  std::size_t w(std::size_t t, std::size_t c) const {
    return n_solutes * ranks.u + n_solvents * ranks.v + t * ranks.w + c;
  }
  std::size_t core(std::size_t a, std::size_t b, std::size_t c) const {
    return n_solutes * ranks.u + n_solvents * ranks.v + n_temps_ * ranks.w +
           (a * ranks.v + b) * ranks.w + c;
  }

  void check(const Cell& c) const {
    if (c.i >= n_solutes || c.j >= n_solvents || c.t >= n_temps_)
      throw RangeError("TCM index out of range");
  }

  double evaluate(const double* th, const Cell& c) const {
    const double* ui = th + u(c.i, 0);
    const double* vj = th + v(c.j, 0);
    const double* wt = th + w(c.t, 0);
    const double* k = th + core(0, 0, 0);
    double f = 0;
    for (std::size_t a = 0; a < ranks.u; ++a) {
      double fa = 0;
      for (std::size_t b = 0; b < ranks.v; ++b) {
        double fab = 0;
        for (std::size_t g = 0; g < ranks.w; ++g)
          fab += wt[g] * k[(a * ranks.v + b) * ranks.w + g];
        fa += vj[b] * fab;
      }
      f += ui[a] * fa;
    }
    return f;
  }

  template <class Coeff>
  double evaluate_and_accumulate(const double* th, const Cell& c, Coeff&& coeff,
                                 double* g) const {
    const std::size_t ru = ranks.u, rv = ranks.v, rw = ranks.w;
    const double* ui = th + u(c.i, 0);
    const double* vj = th + v(c.j, 0);
    const double* wt = th + w(c.t, 0);
    const double* k = th + core(0, 0, 0);
    // contracted[a*rv+b] = sum_c w_c kappa_abc
    double contracted_buf[64];
    std::vector<double> contracted_heap;
    double* contracted = contracted_buf;
    if (ru * rv > 64) {
      contracted_heap.resize(ru * rv);
      contracted = contracted_heap.data();
    }
    double f = 0;
    for (std::size_t a = 0; a < ru; ++a) {
      double fa = 0;
      for (std::size_t b = 0; b < rv; ++b) {
        double fab = 0;
        for (std::size_t gg = 0; gg < rw; ++gg)
          fab += wt[gg] * k[(a * rv + b) * rw + gg];
        contracted[a * rv + b] = fab;
        fa += vj[b] * fab;
      }
      f += ui[a] * fa;
    }
    double s = coeff(f);
    if (s == 0.0) return f;
    double* gu = g + u(c.i, 0);
    double* gv = g + v(c.j, 0);
    double* gw = g + w(c.t, 0);
    double* gk = g + core(0, 0, 0);
    for (std::size_t a = 0; a < ru; ++a) {
      double du = 0;
      for (std::size_t b = 0; b < rv; ++b) {
        double cab = contracted[a * rv + b];
        du += vj[b] * cab;
        gv[b] += s * ui[a] * cab;
        double uv = ui[a] * vj[b];
        for (std::size_t gg = 0; gg < rw; ++gg) {
          double kk = k[(a * rv + b) * rw + gg];
          gw[gg] += s * uv * kk;
          gk[(a * rv + b) * rw + gg] += s * uv * wt[gg];
        }
      }
      gu[a] += s * du;
    }
    return f;
  }
};

/// Gaussian factor set: one GaussianParam per latent scalar plus a constant
/// ln-space offset added to every reconstruction.
template <class Shape>
struct Factors {
  Shape shape;
  std::vector<GaussianParam> params;
  double offset = 0;

  Factors() = default;
  explicit Factors(Shape s, GaussianParam fill = {0.0, 1.0})
      : shape(s), params(s.size(), fill) {}

  GaussianParam& operator[](std::size_t k) { return params[k]; }
  const GaussianParam& operator[](std::size_t k) const { return params[k]; }

  std::vector<double> means() const {
    std::vector<double> m(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) m[k] = params[k].mean;
    return m;
  }

  /// Deterministic reconstruction from the means.
  double mean_prediction(const Cell& c) const {
    shape.check(c);
    auto m = means();
    return offset + shape.evaluate(m.data(), c);
  }
};

using McmFactors = Factors<McmShape>;
using TcmFactors = Factors<TcmShape>;

namespace detail {

/// Running mean/variance (Welford).
struct Moments {
  std::size_t n = 0;
  double mean = 0, m2 = 0;
  void add(double x) {
    ++n;
    double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  double stddev() const {
    return n > 1 ? std::sqrt(m2 / static_cast<double>(n - 1)) : 0.0;
  }
};

inline void draw(std::mt19937_64& rng, std::normal_distribution<double>& nd,
                 std::span<const GaussianParam> src, std::span<double> dst) {
  for (std::size_t k = 0; k < src.size(); ++k)
    dst[k] = src[k].mean + src[k].std * nd(rng);
}

}  // namespace detail

/// Monte-Carlo mean and std of u_i . v_j. Each factor block draws from its
/// own stream so that the same seed gives the same u and v samples as the
/// equivalent single-slab Tucker reconstruction.
inline PredictionDistribution mcm_reconstruct(
    const McmFactors& f, std::size_t i, std::size_t j,
    std::size_t n_samples = kDefaultPredictionSamples,
    std::uint64_t seed = kDefaultPredictionSeed) {
  const auto& s = f.shape;
  s.check({i, j, 0});
  if (n_samples < 1) throw ValidationError("n_samples must be >= 1");
  std::mt19937_64 ru(derive_seed(seed, 1)), rv(derive_seed(seed, 2));
  std::normal_distribution<double> nu, nv;
  std::span<const GaussianParam> up(f.params.data() + s.u(i, 0), s.rank);
  std::span<const GaussianParam> vp(f.params.data() + s.v(j, 0), s.rank);
  std::vector<double> us(s.rank), vs(s.rank);
  detail::Moments m;
  for (std::size_t n = 0; n < n_samples; ++n) {
    detail::draw(ru, nu, up, us);
    detail::draw(rv, nv, vp, vs);
    double dot = 0;
    for (std::size_t k = 0; k < s.rank; ++k) dot += us[k] * vs[k];
    m.add(dot);
  }
  return {f.offset + m.mean, m.stddev(), i, j, 0};
}

inline PredictionDistribution tcm_reconstruct(
    const TcmFactors& f, std::size_t i, std::size_t j, std::size_t t,
    std::size_t n_samples = kDefaultPredictionSamples,
    std::uint64_t seed = kDefaultPredictionSeed) {
  const auto& s = f.shape;
  s.check({i, j, t});
  if (f.params.size() != s.size())
    throw ValidationError("factor set does not match its rank shape");
  if (n_samples < 1) throw ValidationError("n_samples must be >= 1");
  const auto& r = s.ranks;
  std::mt19937_64 ru(derive_seed(seed, 1)), rv(derive_seed(seed, 2)),
      rw(derive_seed(seed, 3)), rk(derive_seed(seed, 4));
  std::normal_distribution<double> nu, nv, nw, nk;
  const GaussianParam* p = f.params.data();
  std::span<const GaussianParam> up(p + s.u(i, 0), r.u), vp(p + s.v(j, 0), r.v),
      wp(p + s.w(t, 0), r.w), kp(p + s.core(0, 0, 0), s.core_size());
  std::vector<double> us(r.u), vs(r.v), ws(r.w), ks(s.core_size());
  detail::Moments m;
  for (std::size_t n = 0; n < n_samples; ++n) {
    detail::draw(ru, nu, up, us);
    detail::draw(rv, nv, vp, vs);
    detail::draw(rw, nw, wp, ws);
    detail::draw(rk, nk, kp, ks);
    double acc = 0;
    for (std::size_t a = 0; a < r.u; ++a)
      for (std::size_t b = 0; b < r.v; ++b)
        for (std::size_t c = 0; c < r.w; ++c)
          acc += us[a] * vs[b] * ws[c] * ks[(a * r.v + b) * r.w + c];
    m.add(acc);
  }
  return {f.offset + m.mean, m.stddev(), i, j, t};
}

inline PredictionDistribution reconstruct(const McmFactors& f, const Cell& c,
                                          std::size_t n_samples,
                                          std::uint64_t seed) {
  return mcm_reconstruct(f, c.i, c.j, n_samples, seed);
}
inline PredictionDistribution reconstruct(const TcmFactors& f, const Cell& c,
                                          std::size_t n_samples,
                                          std::uint64_t seed) {
  return tcm_reconstruct(f, c.i, c.j, c.t, n_samples, seed);
}

/// Dense [i][j][t] grid of predictive distributions, one per cell, each
/// identical to the per-cell reconstruction with the same seed.
struct CompletedTensor {
  std::size_t n_solutes = 0, n_solvents = 0, n_temps = 0;
  std::vector<PredictionDistribution> cells;

  const PredictionDistribution& operator()(std::size_t i, std::size_t j,
                                           std::size_t t) const {
    return cells[(i * n_solvents + j) * n_temps + t];
  }
};

template <class Shape>
CompletedTensor complete_tensor(const Factors<Shape>& f,
                                std::size_t n_samples = kDefaultPredictionSamples,
                                std::uint64_t seed = kDefaultPredictionSeed) {
  CompletedTensor out{f.shape.n_solutes, f.shape.n_solvents, f.shape.n_temps(),
                      {}};
  out.cells.reserve(out.n_solutes * out.n_solvents * out.n_temps);
  for (std::size_t i = 0; i < out.n_solutes; ++i)
    for (std::size_t j = 0; j < out.n_solvents; ++j)
      for (std::size_t t = 0; t < out.n_temps; ++t)
        out.cells.push_back(reconstruct(f, {i, j, t}, n_samples, seed));
  return out;
}

}  // namespace difftensor
