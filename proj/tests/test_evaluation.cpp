#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "difftensor/evaluation.hpp"
#include "support/synthetic.hpp"

using namespace difftensor;

TEST(Metrics, MatchNaiveReference) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> ud(-25.0, -18.0), noise(-0.5, 0.5);
  std::vector<double> ares;
  double ref_sum = 0, ref_sq = 0;
  for (int k = 0; k < 1000; ++k) {
    double e = ud(rng), p = e + noise(rng);
    double are_ref = std::fabs(std::exp(p) - std::exp(e)) / std::exp(e);
    double a = are_from_ln(p, e);
    EXPECT_NEAR(a, are_ref, 1e-12 * are_ref);
    ares.push_back(a);
    ref_sum += are_ref;
    ref_sq += are_ref * are_ref;
  }
  EXPECT_NEAR(rmae(ares), ref_sum / 1000, 1e-12 * ref_sum / 1000);
  EXPECT_NEAR(rmse(ares), ref_sq / 1000, 1e-12 * ref_sq / 1000);
  EXPECT_GE(rmse(ares), rmae(ares) * rmae(ares));
}

TEST(Metrics, Edges) {
  EXPECT_THROW(are(1.0, 0.0), DomainError);
  EXPECT_THROW(rmae(std::vector<double>{}), DomainError);
  EXPECT_EQ(are(2e-9, 2e-9), 0.0);
  EXPECT_DOUBLE_EQ(are(3e-9, 2e-9), 0.5);
  std::vector<double> same(7, 0.3);
  EXPECT_DOUBLE_EQ(rmse(same), 0.09);
}

TEST(Metrics, JensenOnRandomSets) {
  std::mt19937_64 rng(6);
  std::exponential_distribution<double> ed(3.0);
  for (int n = 0; n < 200; ++n) {
    std::vector<double> v(1 + n % 17);
    for (auto& x : v) x = ed(rng);
    EXPECT_GE(rmse(v) + 1e-15, rmae(v) * rmae(v));
  }
}

TEST(Summary, EqualWeightPerPoint) {
  std::vector<FoldResult> folds(2);
  folds[0].points = {{0, 298, 0, 0, 0, 0.1, std::nullopt}, {1, 313, 0, 0, 0, 0.3, std::nullopt}};
  folds[1].points = {{0, 298, 0, 0, 0, 0.2, std::nullopt}};
  folds[1].prior_only = true;
  auto s = summarize(folds);
  EXPECT_EQ(s.folds, 2u);
  EXPECT_EQ(s.prior_only_folds, 1u);
  EXPECT_EQ(s.overall.count, 3u);
  EXPECT_NEAR(s.overall.rmae, 0.2, 1e-15);
  EXPECT_NEAR(s.per_temperature.at(298).rmae, 0.15, 1e-15);
  EXPECT_FALSE(s.baseline_overall);
}

TEST(Box, QuartilesAndWhiskers) {
  auto b = box_stats({1, 2, 3, 4, 5, 6, 7, 8, 100});
  EXPECT_DOUBLE_EQ(b.median, 5);
  EXPECT_DOUBLE_EQ(b.q1, 3);
  EXPECT_DOUBLE_EQ(b.q3, 7);
  EXPECT_DOUBLE_EQ(b.whisker_lo, 1);
  EXPECT_DOUBLE_EQ(b.whisker_hi, 8);
}

TEST(Bins, AlignedHalfOpenWithGaps) {
  auto bins = bin_errors({{301, 0.1}, {309.99, 0.2}, {310, 0.3}, {335, 0.4}});
  ASSERT_EQ(bins.size(), 4u);
  EXPECT_EQ(bins[0].lo, 300);
  EXPECT_EQ(bins[0].count, 2u);
  EXPECT_EQ(bins[1].count, 1u);
  EXPECT_EQ(bins[2].count, 0u);
  EXPECT_FALSE(bins[2].box);
  EXPECT_DOUBLE_EQ(bins[3].center(), 335);
}

TEST(Sweep, RowRoundTrip) {
  SweepRow r{{3, 2, 1}, 0.123456789};
  auto back = parse_sweep_row(format_sweep_row(r));
  EXPECT_EQ(back.ranks, r.ranks);
  EXPECT_EQ(back.rmae, r.rmae);
}

namespace {

LooConfig quick() {
  LooConfig c;
  c.hybrid.train.max_iterations = 1500;
  c.hybrid.train.mc_samples = 4;
  c.n_samples = 100;
  c.ranks = {2, 2, 2};
  return c;
}

difftensor::testing::SyntheticProblem small_problem() {
  difftensor::testing::SyntheticSpec s;
  s.n_solutes = 6;
  s.n_solvents = 5;
  s.occupancy = 0.4;
  return difftensor::testing::make_synthetic(s, 77);
}

}  // namespace

TEST(Loo, TcmFoldPerPairAndDeterministic) {
  auto p = small_problem();
  auto cfg = quick();
  auto a = loo_tcm(p.observed, &p.prior, cfg);
  EXPECT_EQ(a.size(), p.observed.pairs().size());
  std::size_t points = 0;
  for (auto& f : a) points += f.points.size();
  EXPECT_EQ(points, p.observed.size());
  for (auto& f : a)
    for (auto& pt : f.points) ASSERT_TRUE(pt.baseline_ln);
  cfg.jobs = 2;
  auto b = loo_tcm(p.observed, &p.prior, cfg);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t n = 0; n < a[k].points.size(); ++n)
      EXPECT_EQ(a[k].points[n].pred_ln, b[k].points[n].pred_ln);
}

TEST(Loo, TrainingSetWithholdsThePair) {
  auto p = small_problem();
  for (auto& pr : p.observed.pairs()) {
    auto t = loo_training_set(p.observed, pr);
    EXPECT_FALSE(t.has_pair(pr.first, pr.second));
    EXPECT_EQ(t.size() + [&] {
      std::size_t n = 0;
      for (std::size_t k = 0; k < p.observed.n_temps(); ++k)
        n += p.observed.find({pr.first, pr.second, k}) != nullptr;
      return n;
    }(), p.observed.size());
  }
}

TEST(Loo, MatrixFoldPerCell) {
  auto p = small_problem();
  auto cfg = quick();
  cfg.mcm_rank = 2;
  auto folds = loo_mcm(p.observed, 1, nullptr, cfg);
  std::size_t n = 0;
  for (auto& [c, _] : p.observed.entries()) n += c.t == 1;
  EXPECT_EQ(folds.size(), n);
  for (auto& f : folds) {
    ASSERT_EQ(f.points.size(), 1u);
    EXPECT_EQ(f.points[0].temperature, 313.0);
    EXPECT_FALSE(f.points[0].baseline_ln);
  }
}

TEST(Loo, SweepCoversGrid) {
  auto p = small_problem();
  auto cfg = quick();
  cfg.hybrid.train.max_iterations = 500;
  auto rows = hyperparameter_sweep(p.observed, {{1, 1, 1}, {2, 1, 1}}, nullptr, cfg);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].ranks, (TuckerRanks{2, 1, 1}));
  for (auto& r : rows) EXPECT_TRUE(std::isfinite(r.rmae));
  EXPECT_THROW(hyperparameter_sweep(p.observed, {}, nullptr, cfg), ValidationError);
}
