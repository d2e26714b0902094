#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "difftensor/bayes.hpp"

using namespace difftensor;

namespace {

// Three latent scalars: u_0, u_1, v_0.
struct Toy {
  McmShape shape{2, 1, 1};
  Dataset data{{{0, 0, 0}, 0.7}, {{1, 0, 0}, -0.4}};
  PriorSet priors{{0.1, 1.0}, {-0.2, 0.8}, {0.3, 1.2}};
  VariationalParams q{{0.5, -0.3, 0.9}, {std::log(0.3), std::log(0.5), std::log(0.2)}};
};

double estimate(const Toy& t, const VariationalParams& q, ElboGradient* g) {
  std::mt19937_64 rng(99);
  return elbo_estimate(t.shape, q, 0.0, t.data, t.priors, LikelihoodSpec{0.2}, 8, rng, g);
}

}  // namespace

TEST(Kl, ClosedFormIdentities) {
  EXPECT_EQ(gaussian_kl(0.3, 0.7, 0.3, 0.7), 0.0);
  // KL(N(m, s^2) || N(0, 1)) = (s^2 + m^2 - 1)/2 - ln s
  double m = 0.8, s = 0.4;
  EXPECT_NEAR(gaussian_kl(m, s, 0.0, 1.0), 0.5 * (s * s + m * m - 1) - std::log(s), 1e-15);
  EXPECT_GT(gaussian_kl(0.0, 1.0, 1.0, 1.0), 0.0);
}

TEST(Kl, MonteCarloAgreesWithClosedForm) {
  const double m = 0.4, s = 0.6, m0 = -0.2, s0 = 1.3;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  double acc = 0;
  const int n = 400000;
  auto logpdf = [](double x, double mu, double sd) {
    double z = (x - mu) / sd;
    return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2 * std::numbers::pi);
  };
  for (int k = 0; k < n; ++k) {
    double x = m + s * nd(rng);
    acc += logpdf(x, m, s) - logpdf(x, m0, s0);
  }
  EXPECT_NEAR(acc / n, gaussian_kl(m, s, m0, s0), 5e-3);
}

TEST(Likelihood, ScoreIsDerivativeOfLogDensity) {
  LikelihoodSpec lik{0.2};
  for (double r : {-1.0, -0.1, 0.0, 0.05, 0.7}) {
    double fd = (lik.log_density(r + 1e-6) - lik.log_density(r - 1e-6)) / 2e-6;
    // log p(y - f): d/df = -d/dr
    EXPECT_NEAR(lik.score(r), -fd, 1e-6);
  }
}

TEST(Elbo, GradientMatchesCentralDifference) {
  Toy t;
  ElboGradient g;
  estimate(t, t.q, &g);
  const double h = 1e-5;
  for (std::size_t k = 0; k < 3; ++k) {
    for (int which = 0; which < 2; ++which) {
      auto qp = t.q, qm = t.q;
      auto& vp = which ? qp.log_std : qp.mean;
      auto& vm = which ? qm.log_std : qm.mean;
      vp[k] += h;
      vm[k] -= h;
      double fd = (estimate(t, qp, nullptr) - estimate(t, qm, nullptr)) / (2 * h);
      double an = which ? g.log_std[k] : g.mean[k];
      EXPECT_LT(std::abs(an - fd) / std::max(1e-8, std::abs(fd)), 1e-4)
          << "param " << k << (which ? " log_std" : " mean");
    }
  }
}

TEST(Elbo, ChecksInputs) {
  McmShape s{1, 1, 1};
  McmFactors q(s, {0.0, 0.5});
  Dataset d{{{0, 0, 0}, 0.0}};
  EXPECT_THROW(elbo(q, d, PriorSet(1), LikelihoodSpec{}, 4, 1), ValidationError);
  EXPECT_THROW(elbo(q, d, PriorSet(2, {0.0, 0.0}), LikelihoodSpec{}, 4, 1), ValidationError);
  EXPECT_THROW(elbo(q, {{{1, 0, 0}, 0.0}}, standard_normal_priors(2), LikelihoodSpec{}, 4, 1),
               RangeError);
  EXPECT_NO_THROW(elbo(q, d, standard_normal_priors(2), LikelihoodSpec{}, 4, 1));
}

TEST(InformedPriors, ClosedFormProduct) {
  McmFactors post(McmShape{2, 2, 1}, {0.0, 0.5});
  double mu[] = {1.0, -2.0, 0.25, 3.0};
  for (std::size_t k = 0; k < 4; ++k) post[k].mean = mu[k];
  auto pr = make_informed_priors(post);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(pr[k].std * pr[k].std, 0.2, 1e-15);
    EXPECT_NEAR(pr[k].mean, 0.8 * mu[k], 1e-15);
  }
}

TEST(InformedPriors, RescalesToTargetAverage) {
  McmFactors post(McmShape{1, 1, 1});
  post[0] = {1.0, 0.1};
  post[1] = {1.0, 0.3};
  auto pr = make_informed_priors(post, 0.5);
  // rescaled stds 0.25 and 0.75, then multiplied with N(0, 1)
  EXPECT_NEAR(pr[0].std, std::sqrt(1.0 / (1.0 / 0.0625 + 1.0)), 1e-15);
  EXPECT_NEAR(pr[1].std, std::sqrt(1.0 / (1.0 / 0.5625 + 1.0)), 1e-15);
  EXPECT_LT(pr[0].mean, pr[1].mean + 1.0);
}

TEST(Fit, RecoversRankOneMatrix) {
  McmShape s{4, 3, 1};
  double a[] = {1.0, -0.5, 0.8, 0.2}, b[] = {0.6, -1.0, 0.4};
  Dataset d;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      if ((i + j) % 4 != 0) d.push_back({{i, j, 0}, a[i] * b[j]});
  TrainConfig c;
  c.max_iterations = 6000;
  c.seed = 3;
  auto r = fit_variational(s, d, standard_normal_priors(s.size()), LikelihoodSpec{0.05}, c);
  for (auto& p : d) EXPECT_NEAR(r.factors.mean_prediction(p.cell), p.ln_d, 0.08);
  EXPECT_FALSE(r.elbo_trace.empty());
  EXPECT_EQ(r.elbo_trace.size(), r.iterations);
}

TEST(Fit, DeterministicForSeed) {
  McmShape s{3, 3, 1};
  Dataset d{{{0, 0, 0}, 0.5}, {{1, 1, 0}, -0.2}, {{2, 0, 0}, 0.1}};
  TrainConfig c;
  c.max_iterations = 600;
  c.seed = 12;
  auto pr = standard_normal_priors(s.size());
  auto r1 = fit_variational(s, d, pr, LikelihoodSpec{}, c);
  auto r2 = fit_variational(s, d, pr, LikelihoodSpec{}, c);
  EXPECT_EQ(r1.factors.params, r2.factors.params);
  EXPECT_EQ(r1.elbo_trace, r2.elbo_trace);
}

TEST(Fit, RejectsBadConfig) {
  McmShape s{1, 1, 1};
  TrainConfig c;
  c.learning_rate = 0;
  EXPECT_THROW(fit_variational(s, {}, standard_normal_priors(2), LikelihoodSpec{}, c),
               ValidationError);
  c = {};
  EXPECT_THROW(fit_variational(s, {}, standard_normal_priors(2), LikelihoodSpec{0.0}, c),
               ValidationError);
}

TEST(Fit, DivergenceIsReported) {
  McmShape s{1, 1, 1};
  TrainConfig c;
  c.learning_rate = 1e300;
  c.max_iterations = 50;
  EXPECT_THROW(fit_variational(s, {{{0, 0, 0}, 1.0}}, standard_normal_priors(2),
                               LikelihoodSpec{}, c),
               TrainingError);
}

TEST(Hybrid, OffsetAndColdStart) {
  HybridConfig h;
  Dataset syn{{{0, 0, 0}, -20.0}, {{0, 1, 0}, -22.0}};
  Dataset exp{{{0, 0, 0}, -21.0}};
  EXPECT_DOUBLE_EQ(training_offset(h, syn, exp), -21.0);
  h.use_synthetic = false;
  EXPECT_DOUBLE_EQ(training_offset(h, syn, exp), -21.0);
  h.train.standardize = false;
  EXPECT_DOUBLE_EQ(training_offset(h, syn, exp), 0.0);

  HybridConfig cold;
  cold.use_synthetic = false;
  cold.train.max_iterations = 500;
  auto r = hybrid_train(McmShape{1, 2, 1}, syn, exp, cold);  // 3 latent scalars
  EXPECT_FALSE(r.pretrained);
  EXPECT_TRUE(r.step1_trace.empty());
  EXPECT_EQ(r.priors, standard_normal_priors(3));
}

TEST(Hybrid, StepTwoStartsFromInformedPriors) {
  HybridConfig h;
  h.train.max_iterations = 1000;
  McmShape s{2, 2, 1};
  Dataset syn{{{0, 0, 0}, 0.4}, {{0, 1, 0}, -0.4}, {{1, 0, 0}, 0.2}, {{1, 1, 0}, -0.2}};
  Dataset exp{{{0, 0, 0}, 0.5}};
  auto r = hybrid_train(s, syn, exp, h);
  ASSERT_TRUE(r.pretrained);
  EXPECT_EQ(r.priors, make_informed_priors(*r.pretrained));
  EXPECT_FALSE(r.step1_trace.empty());
  EXPECT_FALSE(r.step2_trace.empty());
}
