#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "difftensor/data_model.hpp"
#include "difftensor/error.hpp"
#include "difftensor/factor_models.hpp"
#include "difftensor/util.hpp"

namespace difftensor {

struct LikelihoodSpec {
  double scale = 0.2;  // Cauchy lambda, ln-space

  /// log p(residual) for the Cauchy density.
  double log_density(double residual) const {
    double z = residual / scale;
    return -std::log(std::numbers::pi * scale) - std::log1p(z * z);
  }
  /// d/d(prediction) of log p(y - prediction).
  double score(double residual) const {
    return 2.0 * residual / (scale * scale + residual * residual);
  }
};

struct TrainConfig {
  std::size_t max_iterations = 30000;
  std::size_t mc_samples = 10;        // per gradient step
  double learning_rate = 0.05;
  double lr_decay_steps = 1000;       // lr_t = lr / sqrt(1 + t / decay)
  std::size_t window = 500;           // convergence window
  double tolerance = 1e-4;            // relative ELBO improvement
  double init_std_fraction = 0.1;     // initial q std relative to prior std
  double init_jitter = 0.1;           // initial mean jitter relative to prior std
  bool standardize = true;            // subtract global mean ln D
  std::uint64_t seed = 1;

  void validate() const {
    if (max_iterations < 1 || mc_samples < 1 || window < 1 ||
        !(learning_rate > 0) || !(lr_decay_steps > 0) || !(tolerance > 0) ||
        !(init_std_fraction > 0))
      throw ValidationError("training configuration values must be positive");
  }
};

using PriorSet = std::vector<GaussianParam>;

inline PriorSet standard_normal_priors(std::size_t n) {
  return PriorSet(n, GaussianParam{0.0, 1.0});
}

struct DataPoint {
  Cell cell;
  double ln_d = 0;
};
using Dataset = std::vector<DataPoint>;

inline Dataset to_dataset(const ObservationTensor& t) {
  Dataset d;
  d.reserve(t.size());
  for (auto& [c, o] : t.entries()) d.push_back({c, o.ln_d});
  return d;
}

/// Single slab of a tensor as MCM data (t forced to 0).
inline Dataset to_dataset(const ObservationTensor& tensor, std::size_t slab) {
  Dataset d;
  for (auto& [c, o] : tensor.entries())
    if (c.t == slab) d.push_back({{c.i, c.j, 0}, o.ln_d});
  return d;
}

inline Dataset to_dataset(const DenseTensor& t) {
  Dataset d;
  d.reserve(t.size());
  for (std::size_t i = 0; i < t.n_solutes; ++i)
    for (std::size_t j = 0; j < t.n_solvents; ++j)
      for (std::size_t k = 0; k < t.n_temps; ++k)
        d.push_back({{i, j, k}, t(i, j, k)});
  return d;
}

inline double mean_ln_d(const Dataset& d) {
  if (d.empty()) return 0.0;
  double s = 0;
  for (auto& p : d) s += p.ln_d;
  return s / static_cast<double>(d.size());
}

/// KL(N(m, s^2) || N(m0, s0^2)).
inline double gaussian_kl(double m, double s, double m0, double s0) {
  double dm = m - m0;
  return std::log(s0 / s) + (s * s + dm * dm) / (2.0 * s0 * s0) - 0.5;
}

inline double kl_divergence(std::span<const GaussianParam> q,
                            std::span<const GaussianParam> p) {
  double kl = 0;
  for (std::size_t k = 0; k < q.size(); ++k)
    kl += gaussian_kl(q[k].mean, q[k].std, p[k].mean, p[k].std);
  return kl;
}

/// Mean-field Gaussian q in unconstrained form: means and log-stds.
struct VariationalParams {
  std::vector<double> mean;
  std::vector<double> log_std;

  std::size_t size() const { return mean.size(); }

  template <class Shape>
  static VariationalParams from(const Factors<Shape>& f) {
    VariationalParams v;
    for (auto& p : f.params) {
      if (!(p.std > 0))
        throw ValidationError("variational std must be positive");
      v.mean.push_back(p.mean);
      v.log_std.push_back(std::log(p.std));
    }
    return v;
  }

  template <class Shape>
  Factors<Shape> to_factors(const Shape& shape, double offset) const {
    Factors<Shape> f(shape);
    for (std::size_t k = 0; k < size(); ++k)
      f.params[k] = {mean[k], std::exp(log_std[k])};
    f.offset = offset;
    return f;
  }
};

struct ElboGradient {
  std::vector<double> mean;
  std::vector<double> log_std;
};

namespace detail {

inline void validate_shapes(std::size_t model_size, std::size_t q_size,
                            std::size_t prior_size) {
  if (q_size != model_size || prior_size != model_size)
    throw ValidationError("variational parameters or priors do not match the "
                          "model shape");
}

inline void check_priors(std::span<const GaussianParam> priors) {
  for (auto& p : priors)
    if (!(p.std > 0)) throw ValidationError("prior std must be positive");
}

}  // namespace detail

/// Reparameterized MC estimate of the ELBO with a fixed set of draws taken
/// from `rng`; optionally returns the exact gradient of that estimate.
template <class Shape>
double elbo_estimate(const Shape& shape, const VariationalParams& q,
                     double offset, const Dataset& data,
                     std::span<const GaussianParam> priors,
                     const LikelihoodSpec& lik, std::size_t mc_samples,
                     std::mt19937_64& rng, ElboGradient* grad) {
  const std::size_t n = shape.size();
  detail::validate_shapes(n, q.size(), priors.size());
  std::normal_distribution<double> nd;
  std::vector<double> sigma(n), eps(n), theta(n), g_theta(n);
  for (std::size_t k = 0; k < n; ++k) sigma[k] = std::exp(q.log_std[k]);
  if (grad) {
    grad->mean.assign(n, 0.0);
    grad->log_std.assign(n, 0.0);
  }
  const double inv_s = 1.0 / static_cast<double>(mc_samples);
  double loglik = 0;
  for (std::size_t s = 0; s < mc_samples; ++s) {
    for (std::size_t k = 0; k < n; ++k) {
      eps[k] = nd(rng);
      theta[k] = q.mean[k] + sigma[k] * eps[k];
    }
    double ll = 0;
    if (grad) {
      std::fill(g_theta.begin(), g_theta.end(), 0.0);
      for (auto& p : data) {
        double residual = 0;
        shape.evaluate_and_accumulate(
            theta.data(), p.cell,
            [&](double f) {
              residual = p.ln_d - offset - f;
              return lik.score(residual);
            },
            g_theta.data());
        ll += lik.log_density(residual);
      }
      for (std::size_t k = 0; k < n; ++k) {
        grad->mean[k] += inv_s * g_theta[k];
        grad->log_std[k] += inv_s * g_theta[k] * sigma[k] * eps[k];
      }
    } else {
      for (auto& p : data)
        ll += lik.log_density(p.ln_d - offset - shape.evaluate(theta.data(), p.cell));
    }
    loglik += inv_s * ll;
  }
  double kl = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double m0 = priors[k].mean, s0 = priors[k].std;
    kl += gaussian_kl(q.mean[k], sigma[k], m0, s0);
    if (grad) {
      grad->mean[k] -= (q.mean[k] - m0) / (s0 * s0);
      grad->log_std[k] -= sigma[k] * sigma[k] / (s0 * s0) - 1.0;
    }
  }
  return loglik - kl;
}

/// ELBO = E_q[log p(data | theta)] - KL(q || prior), estimated with
/// `mc_samples` reparameterized draws from a generator seeded by `seed`.
template <class Shape>
double elbo(const Factors<Shape>& q, const Dataset& data,
            std::span<const GaussianParam> priors, const LikelihoodSpec& lik,
            std::size_t mc_samples, std::uint64_t seed) {
  detail::check_priors(priors);
  if (mc_samples < 1) throw ValidationError("mc_samples must be >= 1");
  for (auto& p : data) q.shape.check(p.cell);
  std::mt19937_64 rng(seed);
  double value = elbo_estimate(q.shape, VariationalParams::from(q), q.offset,
                               data, priors, lik, mc_samples, rng, nullptr);
  if (!std::isfinite(value)) throw NumericalError("non-finite ELBO estimate");
  return value;
}

enum class FitStatus { converged, max_iterations };

template <class Shape>
struct FitResult {
  Factors<Shape> factors;
  std::vector<double> elbo_trace;
  FitStatus status = FitStatus::max_iterations;
  std::size_t iterations = 0;
};

/// Stochastic-gradient ADVI with Adam and a decaying step size. Stops when
/// the mean ELBO of the latest window improves on the previous window by
/// less than `tolerance` (relative); otherwise returns the best window's
/// iterate with status max_iterations.
template <class Shape>
FitResult<Shape> fit_variational(const Shape& shape, const Dataset& data,
                                 std::span<const GaussianParam> priors,
                                 const LikelihoodSpec& lik,
                                 const TrainConfig& config, double offset = 0) {
  config.validate();
  if (!(lik.scale > 0)) throw ValidationError("likelihood scale must be > 0");
  detail::check_priors(priors);
  const std::size_t n = shape.size();
  detail::validate_shapes(n, n, priors.size());
  for (auto& p : data) shape.check(p.cell);

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> nd;
  VariationalParams q;
  q.mean.resize(n);
  q.log_std.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    q.mean[k] = priors[k].mean + config.init_jitter * priors[k].std * nd(rng);
    q.log_std[k] = std::log(config.init_std_fraction * priors[k].std);
  }

  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::vector<double> m1(2 * n, 0.0), m2(2 * n, 0.0);
  ElboGradient grad;
  FitResult<Shape> result;
  result.elbo_trace.reserve(config.max_iterations);

  double prev_window = 0, cur_window_sum = 0;
  bool have_prev = false;
  double best_window = -std::numeric_limits<double>::infinity();
  VariationalParams best = q;
  double b1t = 1, b2t = 1;

  for (std::size_t it = 1; it <= config.max_iterations; ++it) {
    double value = elbo_estimate(shape, q, offset, data, priors, lik,
                                 config.mc_samples, rng, &grad);
    if (!std::isfinite(value))
      throw TrainingError("ELBO diverged (non-finite) at iteration " +
                          std::to_string(it) +
                          "; try a smaller learning rate");
    result.elbo_trace.push_back(value);
    cur_window_sum += value;

    b1t *= beta1;
    b2t *= beta2;
    const double lr = config.learning_rate /
                      std::sqrt(1.0 + static_cast<double>(it) / config.lr_decay_steps);
    for (std::size_t k = 0; k < 2 * n; ++k) {
      double g = k < n ? grad.mean[k] : grad.log_std[k - n];
      m1[k] = beta1 * m1[k] + (1 - beta1) * g;
      m2[k] = beta2 * m2[k] + (1 - beta2) * g * g;
      double step = lr * (m1[k] / (1 - b1t)) / (std::sqrt(m2[k] / (1 - b2t)) + adam_eps);
      if (k < n) q.mean[k] += step;
      else q.log_std[k - n] += step;
    }
    result.iterations = it;

    if (it % config.window == 0) {
      double cur = cur_window_sum / static_cast<double>(config.window);
      cur_window_sum = 0;
      if (cur > best_window) {
        best_window = cur;
        best = q;
      }
      if (have_prev) {
        double improvement =
            (cur - prev_window) / std::max(std::abs(prev_window), 1e-12);
        if (improvement < config.tolerance) {
          result.status = FitStatus::converged;
          break;
        }
      }
      prev_window = cur;
      have_prev = true;
    }
  }
  const VariationalParams& final_q =
      result.status == FitStatus::converged ? q : best;
  result.factors = final_q.template to_factors<Shape>(shape, offset);
  return result;
}

/// Keeps the posterior means, rescales every std by one constant so that
/// their arithmetic mean equals `target_avg_std`, then multiplies each
/// Gaussian by the standard normal density.
template <class Shape>
PriorSet make_informed_priors(const Factors<Shape>& posterior,
                              double target_avg_std = 0.5) {
  if (posterior.params.empty()) return {};
  double sum = 0;
  for (auto& p : posterior.params) {
    if (!(p.std > 0))
      throw ValidationError("posterior std must be positive for informed priors");
    sum += p.std;
  }
  const double scale =
      target_avg_std / (sum / static_cast<double>(posterior.params.size()));
  PriorSet out;
  out.reserve(posterior.params.size());
  for (auto& p : posterior.params) {
    double s = p.std * scale;
    double precision = 1.0 / (s * s) + 1.0;
    double var = 1.0 / precision;
    out.push_back({var * (p.mean / (s * s)), std::sqrt(var)});
  }
  return out;
}

struct HybridConfig {
  TrainConfig train;
  LikelihoodSpec likelihood;
  double target_avg_std = 0.5;
  bool use_synthetic = true;  // false: single fit with N(0,1) priors
};

template <class Shape>
struct HybridResult {
  Factors<Shape> factors;
  std::optional<Factors<Shape>> pretrained;  // step-1 posterior
  PriorSet priors;                           // priors used in step 2
  std::vector<double> step1_trace, step2_trace;
  FitStatus step1_status = FitStatus::converged;
  FitStatus step2_status = FitStatus::converged;
};

/// Global ln-space offset: synthetic mean when a synthetic tensor is used,
/// otherwise the experimental mean (0 when standardization is off).
inline double training_offset(const HybridConfig& cfg, const Dataset& synthetic,
                              const Dataset& experimental) {
  if (!cfg.train.standardize) return 0.0;
  if (cfg.use_synthetic && !synthetic.empty()) return mean_ln_d(synthetic);
  return mean_ln_d(experimental);
}

/// Step 1 of hybrid training: fit the dense synthetic data with N(0,1)
/// priors.
template <class Shape>
FitResult<Shape> pretrain(const Shape& shape, const Dataset& synthetic,
                          const HybridConfig& cfg, double offset) {
  TrainConfig c = cfg.train;
  c.seed = derive_seed(cfg.train.seed, 101);
  auto priors = standard_normal_priors(shape.size());
  return fit_variational(shape, synthetic, priors, cfg.likelihood, c, offset);
}

/// Step 2 given an existing step-1 posterior (reused across LOO folds).
template <class Shape>
HybridResult<Shape> finetune(const Shape& shape,
                             const std::optional<Factors<Shape>>& pretrained,
                             const Dataset& experimental,
                             const HybridConfig& cfg, double offset) {
  HybridResult<Shape> r;
  r.pretrained = pretrained;
  r.priors = pretrained ? make_informed_priors(*pretrained, cfg.target_avg_std)
                        : standard_normal_priors(shape.size());
  TrainConfig c = cfg.train;
  c.seed = derive_seed(cfg.train.seed, 202);
  auto fit = fit_variational(shape, experimental, r.priors, cfg.likelihood, c,
                             offset);
  r.factors = std::move(fit.factors);
  r.step2_trace = std::move(fit.elbo_trace);
  r.step2_status = fit.status;
  return r;
}

/// Two-step hybrid training: synthetic pre-training, informed priors,
/// experimental fit. Without synthetic data it reduces to one cold-start fit.
template <class Shape>
HybridResult<Shape> hybrid_train(const Shape& shape, const Dataset& synthetic,
                                 const Dataset& experimental,
                                 const HybridConfig& cfg) {
  const bool two_step = cfg.use_synthetic && !synthetic.empty();
  const double offset = training_offset(cfg, synthetic, experimental);
  std::optional<Factors<Shape>> pre;
  std::vector<double> trace1;
  FitStatus s1 = FitStatus::converged;
  if (two_step) {
    auto fit = pretrain(shape, synthetic, cfg, offset);
    pre = std::move(fit.factors);
    trace1 = std::move(fit.elbo_trace);
    s1 = fit.status;
  }
  auto r = finetune(shape, pre, experimental, cfg, offset);
  r.step1_trace = std::move(trace1);
  r.step1_status = s1;
  return r;
}

}  // namespace difftensor
