// Acceptance report: one PASS/FAIL line per criterion, non-zero exit on any
// FAIL. Pass criterion names (AC1 ... AC9) to run a subset.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "difftensor/bayes.hpp"
#include "difftensor/campaign.hpp"
#include "difftensor/cli.hpp"
#include "difftensor/evaluation.hpp"
#include "difftensor/nmr.hpp"
#include "difftensor/service.hpp"
#include "difftensor/temperature.hpp"
#include "support/server.hpp"
#include "support/synthetic.hpp"

using namespace difftensor;
using nlohmann::json;
namespace fs = std::filesystem;
namespace dt = difftensor::testing;

namespace {

struct Outcome {
  enum Kind { pass, fail, skip } kind;
  std::string detail;
};

Outcome check(bool ok, std::string detail) {
  return {ok ? Outcome::pass : Outcome::fail, std::move(detail)};
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ARE of each held-out LOO prediction against the noiseless generator.
double rmae_vs_truth(const std::vector<FoldResult>& folds, const DenseTensor& truth) {
  std::vector<double> a;
  for (auto& f : folds)
    for (auto& p : f.points) a.push_back(are_from_ln(p.pred_ln, truth(f.i, f.j, p.t)));
  return rmae(a);
}

constexpr int kSeeds = 5;

dt::SyntheticProblem recovery_problem(int s, double prior_bias) {
  dt::SyntheticSpec spec;  // 20 x 15 x 3, 10 % occupancy, Cauchy noise 0.05
  spec.prior_bias = prior_bias;
  return dt::make_synthetic(spec, 1000 + s);
}

LooConfig recovery_config(int s) {
  LooConfig cfg;
  cfg.hybrid.train.seed = 7 + s;
  return cfg;
}

Outcome ac1() {
  std::string per;
  double sum = 0;
  for (int s = 0; s < kSeeds; ++s) {
    auto p = recovery_problem(s, 0.0);
    double r = rmae_vs_truth(loo_tcm(p.observed, &p.prior, recovery_config(s)), p.truth);
    sum += r;
    per += fmt(" %.3f", r);
  }
  double mean = sum / kSeeds;
  return check(mean <= 0.15, "hybrid TCM LOO rMAE" + fmt(" %.4f", mean) + " <= 0.15 (seeds" +
                                 per + ")");
}

Outcome ac2() {
  int wins = 0;
  std::string per;
  for (int s = 0; s < kSeeds; ++s) {
    auto p = recovery_problem(s, 0.2);
    auto cfg = recovery_config(s);
    double hybrid = rmae_vs_truth(loo_tcm(p.observed, &p.prior, cfg), p.truth);
    cfg.hybrid.use_synthetic = false;
    double cold = rmae_vs_truth(loo_tcm(p.observed, nullptr, cfg), p.truth);
    wins += hybrid <= cold;
    per += fmt(" %.3f", hybrid) + fmt("/%.3f", cold);
  }
  return check(wins >= 4, "hybrid <= cold start in " + std::to_string(wins) +
                              "/5 seeds (hybrid/cold" + per + ")");
}

// Fully observed so that the error reflects the temperature model rather
// than completion of missing pairs.
Outcome ac3() {
  double min_r2 = 1.0, sum = 0;
  std::string per;
  for (int s = 0; s < kSeeds; ++s) {
    dt::SyntheticSpec spec;
    spec.occupancy = 1.0;
    auto p = dt::make_synthetic(spec, 300 + s);
    HybridConfig hc;
    hc.train.seed = 5 + s;
    TcmShape shape{spec.n_solutes, spec.n_solvents, spec.temperatures.size(), {2, 2, 2}};
    auto r = hybrid_train(shape, to_dataset(p.prior), to_dataset(p.observed), hc);
    auto lin = fit_w_linear(r.factors, spec.temperatures);
    for (auto& d : lin.dims) min_r2 = std::min(min_r2, d.r_squared);

    // The generator is linear in T, so its 305 K slab interpolates 298 and 313.
    const double x = (305.0 - 298.0) / (313.0 - 298.0);
    std::vector<double> ares;
    for (std::size_t i = 0; i < spec.n_solutes; ++i)
      for (std::size_t j = 0; j < spec.n_solvents; ++j) {
        double truth = (1 - x) * p.truth(i, j, 0) + x * p.truth(i, j, 1);
        auto pred = predict_at_temperature(r.factors, lin, i, j, 305.0);
        ares.push_back(are_from_ln(pred.ln_d_mean, truth));
      }
    sum += rmae(ares);
    per += fmt(" %.3f", rmae(ares));
  }
  double e = sum / kSeeds;
  return check(min_r2 >= 0.99 && e <= 0.05, "min R2" + fmt(" %.5f", min_r2) +
                                                " >= 0.99, 305 K rMAE" + fmt(" %.4f", e) +
                                                " <= 0.05 (seeds" + per + ")");
}

Outcome ac4() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> ud(-25.0, -18.0), noise(-0.5, 0.5);
  std::vector<double> ares;
  double worst = 0, ref_sum = 0, ref_sq = 0;
  for (int k = 0; k < 1000; ++k) {
    double e = ud(rng), p = e + noise(rng);
    double ref = std::fabs(std::exp(p) - std::exp(e)) / std::exp(e);
    double a = are_from_ln(p, e);
    worst = std::max(worst, std::fabs(a - ref) / ref);
    ares.push_back(a);
    ref_sum += ref;
    ref_sq += ref * ref;
  }
  worst = std::max(worst, std::fabs(rmae(ares) - ref_sum / 1000) / (ref_sum / 1000));
  worst = std::max(worst, std::fabs(rmse(ares) - ref_sq / 1000) / (ref_sq / 1000));
  bool jensen = rmse(ares) >= rmae(ares) * rmae(ares);
  std::exponential_distribution<double> ed(3.0);
  for (int n = 0; n < 1000 && jensen; ++n) {
    std::vector<double> v(1 + n % 23);
    for (auto& a : v) a = ed(rng);
    jensen = rmse(v) + 1e-15 >= rmae(v) * rmae(v);
  }
  return check(worst <= 1e-12 && jensen,
               "max relative deviation" + fmt(" %.2e", worst) + " <= 1e-12, rMSE >= rMAE^2 " +
                   (jensen ? "holds" : "violated"));
}

Outcome ac5() {
  McmShape shape{2, 1, 1};  // u_0, u_1, v_0
  Dataset data{{{0, 0, 0}, 0.7}, {{1, 0, 0}, -0.4}};
  PriorSet priors{{0.1, 1.0}, {-0.2, 0.8}, {0.3, 1.2}};
  VariationalParams q{{0.5, -0.3, 0.9}, {std::log(0.3), std::log(0.5), std::log(0.2)}};
  auto f = [&](const VariationalParams& v, ElboGradient* g) {
    std::mt19937_64 rng(99);
    return elbo_estimate(shape, v, 0.0, data, priors, LikelihoodSpec{0.2}, 8, rng, g);
  };
  ElboGradient g;
  f(q, &g);
  double worst = 0;
  const double h = 1e-5;
  for (std::size_t k = 0; k < 3; ++k)
    for (int which = 0; which < 2; ++which) {
      auto qp = q, qm = q;
      (which ? qp.log_std : qp.mean)[k] += h;
      (which ? qm.log_std : qm.mean)[k] -= h;
      double fd = (f(qp, nullptr) - f(qm, nullptr)) / (2 * h);
      double an = which ? g.log_std[k] : g.mean[k];
      worst = std::max(worst, std::fabs(an - fd) / std::max(1e-8, std::fabs(fd)));
    }
  return check(worst < 1e-4, "max relative gradient error" + fmt(" %.2e", worst) + " < 1e-4");
}

Outcome ac6() {
  McmFactors post(McmShape{3, 2, 1}, {0.0, 0.5});
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd(0.0, 2.0);
  std::vector<double> mu;
  for (auto& p : post.params) mu.push_back(p.mean = nd(rng));
  auto pr = make_informed_priors(post);
  double worst = 0;
  for (std::size_t k = 0; k < pr.size(); ++k) {
    worst = std::max(worst, std::fabs(pr[k].std * pr[k].std - 0.2));
    worst = std::max(worst, std::fabs(pr[k].mean - 0.8 * mu[k]));
  }
  return check(worst <= 1e-15,
               "sigma'^2 = 0.2 and mu' = 0.8 mu, max deviation" + fmt(" %.1e", worst));
}

Outcome ac7() {
  std::vector<double> g;
  for (int k = 0; k < 8; ++k) g.push_back(0.02 + 0.06 * k);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> ld(std::log(1e-11), std::log(1e-8));
  double worst = 0;
  for (int n = 0; n < 50; ++n) {
    double d = std::exp(ld(rng));
    auto s = nmr::simulate_attenuation(d, g, 1e-3, 50e-3, 0.2e-3);
    worst = std::max(worst, std::fabs(nmr::stejskal_fit(s).d / d - 1));
  }
  nmr::DilutionSeries series{{0.005, 0.01, 0.025}, {1.05e-9, 1.10e-9, 1.25e-9}, {}, 298};
  double d_inf = nmr::extrapolate_infinite_dilution(series).d_inf;
  double icpt = std::fabs(d_inf / 1.0e-9 - 1);
  return check(worst <= 1e-6 && icpt <= 1e-12,
               "Stejskal round trip max relative error" + fmt(" %.1e", worst) +
                   ", collinear intercept relative error" + fmt(" %.1e", icpt));
}

// --- AC8 ------------------------------------------------------------------

bool argmax_matches_brute_force() {
  std::mt19937_64 rng(8);
  for (int n = 0; n < 1000; ++n) {
    std::size_t ni = 1 + rng() % 8, nj = 1 + rng() % 8;
    UncertaintyMap m{ni, nj, std::vector<double>(ni * nj)};
    // Few distinct levels so that ties are common.
    for (auto& v : m.values) v = static_cast<double>(rng() % 5);
    SamplingPool pool;
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j)
        if (rng() % 3) pool.candidates.insert({i, j});
    if (pool.empty()) continue;
    Pair best{0, 0};
    double bv = -1;
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j)
        if (pool.contains({i, j}) && m(i, j) > bv) {
          bv = m(i, j);
          best = {i, j};
        }
    if (select_query(m, pool) != best) return false;
  }
  return true;
}

bool exclusion_on_third_selection() {
  SamplingPool pool;
  pool.threshold = 3;
  pool.solute_streak.assign(3, 0);
  pool.solvent_streak.assign(5, 0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) pool.candidates.insert({i, j});
  record_selection(pool, {0, 0});
  record_selection(pool, {0, 1});
  if (!pool.excluded_solutes.empty() || !pool.contains({0, 2})) return false;
  record_selection(pool, {0, 2});
  if (pool.excluded_solutes != std::set<std::size_t>{0}) return false;
  for (auto& p : pool.candidates)
    if (p.first == 0) return false;
  return pool.excluded_solvents.empty() && pool.size() == 10;
}

struct Replay {
  std::vector<std::pair<int, int>> selected;
  std::vector<std::string> hashes;
};

Replay cli_replay(const fs::path& dir, const std::vector<std::string>& model_args,
                  std::size_t rounds, std::uint64_t seed) {
  std::vector<std::string> args = {"--out", (dir / "cli").string(), "--seed",
                                   std::to_string(seed), "al-simulate",
                                   "--components", (dir / "components.csv").string(),
                                   "--observations", (dir / "oracle.csv").string(),
                                   "--initial", (dir / "initial.csv").string(),
                                   "--rounds", std::to_string(rounds)};
  args.insert(args.end(), model_args.begin(), model_args.end());
  std::ostringstream out, err;
  if (cli::dispatch(args, out, err) != 0)
    throw std::runtime_error("al-simulate failed: " + err.str());
  auto t = parse_csv(read_file((dir / "cli" / "learning_curve.csv").string()));
  Replay r;
  for (auto& row : t.rows) {
    if (row.fields[t.column("temperature_K")] != "all") continue;
    r.hashes.push_back(row.fields[t.column("checkpoint_hash")]);
    auto& su = row.fields[t.column("solute_id")];
    if (!su.empty())
      r.selected.push_back({std::stoi(su), std::stoi(row.fields[t.column("solvent_id")])});
  }
  return r;
}

Replay api_replay(const fs::path& dir, const ObservationTensor& oracle, const json& config,
                  std::size_t rounds) {
  dt::LocalServer server({(dir / "service").string(), 1});
  auto c = server.client();
  httplib::MultipartFormDataItems items{
      {"components", read_file((dir / "components.csv").string()), "components.csv", ""},
      {"observations", read_file((dir / "initial.csv").string()), "initial.csv", ""}};
  auto up = c.Post("/v1/datasets", items);
  if (!up || up->status != 201) throw std::runtime_error("dataset upload failed");
  auto start = c.Post("/v1/campaigns",
                      json{{"dataset_id", json::parse(up->body).at("dataset_id")},
                           {"config", config}}
                          .dump(),
                      "application/json");
  if (!start || start->status != 201) throw std::runtime_error("campaign start failed");
  const std::string base = "/v1/campaigns/" + json::parse(start->body).at("campaign_id").get<std::string>();
  Replay r;
  for (std::size_t k = 0;; ++k) {
    server.service().wait_idle();
    json st = json::parse(c.Get(base)->body);
    r.hashes.push_back(st.at("checkpoint_hash"));
    if (k == rounds || st.at("pool_size").get<std::size_t>() == 0) break;
    json next = json::parse(c.Get(base + "/next")->body);
    int su = next.at("solute_id"), sv = next.at("solvent_id");
    r.selected.push_back({su, sv});
    auto i = *oracle.solute_index(su), j = *oracle.solvent_index(sv);
    json values = json::array();
    for (std::size_t t = 0; t < oracle.n_temps(); ++t) {
      const Observation* o = oracle.find({i, j, t});
      json v = {{"temperature", oracle.temperatures()[t]}, {"d", std::exp(o->ln_d)}};
      if (o->sigma) v["sigma"] = *o->sigma;
      values.push_back(v);
    }
    auto ack = c.Post(base + "/measurements",
                      json{{"solute_id", su}, {"solvent_id", sv}, {"values", values}}.dump(),
                      "application/json");
    if (!ack || ack->status != 202) throw std::runtime_error("measurement rejected");
  }
  return r;
}

Outcome ac8() {
  bool argmax = argmax_matches_brute_force();
  bool excl = exclusion_on_third_selection();

  // Dense oracle so that the simulated pool and the service pool coincide.
  dt::SyntheticSpec spec;
  spec.n_solutes = 6;
  spec.n_solvents = 5;
  spec.occupancy = 1.0;
  auto p = dt::make_synthetic(spec, 88);
  auto dir = dt::scratch_dir("acceptance-replay");
  write_file((dir / "components.csv").string(), write_components(*p.registry));
  write_file((dir / "oracle.csv").string(), write_observations(p.observed));
  ObservationTensor initial = p.observed.empty_like();
  std::size_t k = 0;
  for (auto& pr : p.observed.pairs())
    if (k++ % 3 == 0)
      for (std::size_t t = 0; t < p.observed.n_temps(); ++t)
        initial.set({pr.first, pr.second, t}, *p.observed.find({pr.first, pr.second, t}));
  write_file((dir / "initial.csv").string(), write_observations(initial));
  // Both routes read the same files.
  auto reg = std::make_shared<const ComponentRegistry>(
      parse_components(read_file((dir / "components.csv").string())));
  auto oracle = build_tensor(reg, parse_observations(read_file((dir / "oracle.csv").string()), *reg));

  const std::size_t rounds = 6;
  const std::uint64_t seed = 11;
  auto cli = cli_replay(dir,
                        {"--rank", "2,2,1", "--max-iterations", "800", "--mc-samples", "3",
                         "--samples", "100", "--synthetic", "segwe"},
                        rounds, seed);
  auto api = api_replay(dir, oracle,
                        {{"ranks", {2, 2, 1}}, {"max_iterations", 800}, {"mc_samples", 3},
                         {"n_samples", 100}, {"use_synthetic", true}, {"seed", seed}},
                        rounds);
  bool replay = !cli.selected.empty() && cli.selected == api.selected && cli.hashes == api.hashes;
  std::string detail = std::string("argmax on 1000 pools ") + (argmax ? "ok" : "MISMATCH") +
                       ", exclusion on 3rd selection " + (excl ? "ok" : "WRONG") + ", " +
                       std::to_string(cli.selected.size()) + " CLI rounds vs " +
                       std::to_string(api.selected.size()) + " API rounds " +
                       (replay ? "bit-identical" : "DIFFER");
  return check(argmax && excl && replay, detail);
}

Outcome ac9() {
  const char* dir = std::getenv("DIFFTENSOR_DDB_DIR");
  if (!dir)
    return {Outcome::skip, "requires the licensed dataset; set DIFFTENSOR_DDB_DIR to a directory "
                           "with components.csv and observations.csv"};
  auto out = dt::scratch_dir("acceptance-ddb");
  std::ostringstream o, e;
  int code = cli::dispatch({"--out", out.string(), "loo-eval", "--components",
                            std::string(dir) + "/components.csv", "--observations",
                            std::string(dir) + "/observations.csv"},
                           o, e);
  if (code != 0) return check(false, "loo-eval failed: " + e.str());
  json s = json::parse(read_file((out / "summary.json").string()));
  if (!s.contains("continuous") || !s.contains("continuous_segwe"))
    return check(false, "dataset has no off-grid observations");
  double tcm = s["continuous"]["rmae"], segwe = s["continuous_segwe"]["rmae"];
  return check(std::fabs(tcm - 0.118) <= 0.03 && std::fabs(segwe - 0.263) <= 0.03,
               "continuous rMAE TCM" + fmt(" %.3f", tcm) + " (0.118 +- 0.03), SEGWE" +
                   fmt(" %.3f", segwe) + " (0.263 +- 0.03)");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4}, {"AC5", ac5},
      {"AC6", ac6}, {"AC7", ac7}, {"AC8", ac8}, {"AC9", ac9}};
  std::set<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (auto& [name, run] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      r = run();
    } catch (const std::exception& e) {
      r = {Outcome::fail, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* tag = r.kind == Outcome::pass ? "PASS" : r.kind == Outcome::fail ? "FAIL" : "SKIP";
    failures += r.kind == Outcome::fail;
    std::printf("%s %s  %s  [%.1f s]\n", name.c_str(), tag, r.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures ? 1 : 0;
}
