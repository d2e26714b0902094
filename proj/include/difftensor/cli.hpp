#pragma once

#include <atomic>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "difftensor/bayes.hpp"
#include "difftensor/campaign.hpp"
#include "difftensor/checkpoint.hpp"
#include "difftensor/data_model.hpp"
#include "difftensor/error.hpp"
#include "difftensor/evaluation.hpp"
#include "difftensor/nmr.hpp"
#include "difftensor/predict.hpp"
#include "difftensor/segwe.hpp"
#include "difftensor/service.hpp"
#include "difftensor/temperature.hpp"

namespace difftensor::cli {

inline constexpr const char* kVersion = "0.1.0";

using nlohmann::json;
namespace fs = std::filesystem;

inline std::vector<std::size_t> parse_size_list(std::string_view s, std::string_view what) {
  std::vector<std::size_t> out;
  for (auto& f : split_csv_line(s)) {
    long long v = parse_int(f, 0, what);
    if (v < 1) throw ValidationError(std::string(what) + " entries must be >= 1");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline std::vector<int> parse_id_list(std::string_view s) {
  std::vector<int> out;
  for (auto& f : split_csv_line(s))
    if (!trim(f).empty()) out.push_back(static_cast<int>(parse_int(f, 0, "id")));
  return out;
}

inline TuckerRanks parse_ranks(std::string_view s) {
  auto r = parse_size_list(s, "rank");
  if (r.size() != 3) throw ValidationError("TCM rank needs three entries r_u,r_v,r_w");
  return {r[0], r[1], r[2]};
}

/// "1,1,1;2,2,2" or a maximum rank R meaning every combination in [1, R]^3.
inline std::vector<TuckerRanks> parse_rank_grid(std::string_view s) {
  std::vector<TuckerRanks> out;
  if (s.find(',') == std::string_view::npos) {
    std::size_t r = static_cast<std::size_t>(parse_int(s, 0, "max rank"));
    if (r < 1) throw ValidationError("max rank must be >= 1");
    for (std::size_t a = 1; a <= r; ++a)
      for (std::size_t b = 1; b <= r; ++b)
        for (std::size_t c = 1; c <= r; ++c) out.push_back({a, b, c});
    return out;
  }
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t end = s.find(';', pos);
    if (end == std::string_view::npos) end = s.size();
    auto item = trim(s.substr(pos, end - pos));
    if (!item.empty()) out.push_back(parse_ranks(item));
    pos = end + 1;
  }
  return out;
}

/// Options shared by every subcommand that trains a model.
struct ModelOptions {
  std::string model = "tcm";
  std::string temps = "298,313,333";
  std::string rank = "2,2,2";
  double lambda = 0.2;
  std::string synthetic = "segwe";
  double slab_temp = 298.0;
  std::size_t max_iterations = TrainConfig{}.max_iterations;
  std::size_t mc_samples = TrainConfig{}.mc_samples;
  double learning_rate = TrainConfig{}.learning_rate;
  std::size_t samples = kDefaultPredictionSamples;
  double rho = segwe::kDefaultEffectiveDensity;

  void add(CLI::App* sub, bool with_model = true) {
    if (with_model)
      sub->add_option("--model", model, "mcm or tcm")->check(CLI::IsMember({"mcm", "tcm"}));
    sub->add_option("--temps", temps, "temperature grid in K, comma separated");
    sub->add_option("--rank", rank, "TCM ranks r_u,r_v,r_w or MCM rank r");
    sub->add_option("--lambda", lambda, "Cauchy likelihood scale (ln-space)");
    sub->add_option("--synthetic", synthetic, "prior tensor: segwe or none")
        ->check(CLI::IsMember({"segwe", "none"}));
    sub->add_option("--slab-temp", slab_temp, "temperature of the MCM slab, K");
    sub->add_option("--max-iterations", max_iterations, "ADVI iteration cap");
    sub->add_option("--mc-samples", mc_samples, "reparameterized draws per step");
    sub->add_option("--learning-rate", learning_rate, "Adam step size");
    sub->add_option("--samples", samples, "Monte-Carlo samples per prediction");
    sub->add_option("--rho", rho, "SEGWE effective density, kg/m^3");
  }

  std::vector<double> grid() const {
    auto g = parse_double_list(temps);
    if (g.empty()) throw ValidationError("--temps is empty");
    return g;
  }

  HybridConfig hybrid(std::uint64_t seed) const {
    HybridConfig h;
    h.likelihood.scale = lambda;
    h.use_synthetic = synthetic == "segwe";
    h.train.max_iterations = max_iterations;
    h.train.mc_samples = mc_samples;
    h.train.learning_rate = learning_rate;
    h.train.seed = seed;
    if (!(lambda > 0)) throw ValidationError("--lambda must be > 0");
    h.train.validate();
    return h;
  }

  std::size_t mcm_rank() const {
    auto r = parse_size_list(rank, "rank");
    if (r.size() == 1) return r[0];
    if (r.size() == 3 && r[0] == r[1]) return r[0];
    throw ValidationError("MCM rank must be a single integer");
  }
};

struct Globals {
  std::string out = "difftensor-out";
  std::size_t jobs = 1;
  std::uint64_t seed = 1;
};

/// Records inputs and outputs of one run and writes manifest.json.
class Manifest {
 public:
  void input(const std::string& role, const std::string& path) {
    inputs_[role] = {{"path", path}, {"fnv1a", hex64(fnv1a(read_file(path)))}};
  }
  void write(const Globals& g, const std::string& command,
             const std::vector<std::string>& argv, const json& settings,
             const std::vector<std::string>& outputs) const {
    json outs = json::object();
    for (auto& f : outputs) {
      fs::path p = fs::path(g.out) / f;
      if (fs::exists(p)) outs[f] = hex64(fnv1a(read_file(p.string())));
    }
    json j = {{"tool", "difftensor"},
              {"version", kVersion},
              {"command", command},
              {"argv", argv},
              {"settings", settings},
              {"seed", g.seed},
              {"jobs", g.jobs},
              {"inputs", inputs_},
              {"outputs", outs}};
    write_file((fs::path(g.out) / "manifest.json").string(), j.dump(1) + "\n");
  }

 private:
  json inputs_ = json::object();
};

/// Resolved argv of a subcommand: every option that received a value from
/// the command line, a config file or the environment.
inline std::vector<std::string> resolved_args(const CLI::App& app, const CLI::App& sub,
                                              const Globals& g) {
  std::vector<std::string> args = {"--seed", std::to_string(g.seed), "--jobs",
                                   std::to_string(g.jobs), sub.get_name()};
  for (const CLI::Option* o : sub.get_options()) {
    if (o->get_name() == "--help" || o->count() == 0) continue;
    if (o->get_positional()) {
      for (auto& r : o->results()) args.push_back(r);
      continue;
    }
    std::string name = o->get_name(false, true);
    if (o->get_type_size() == 0) {
      args.push_back(name);
      continue;
    }
    for (auto& r : o->results()) {
      args.push_back(name);
      args.push_back(r);
    }
  }
  (void)app;
  return args;
}

inline json settings_json(const CLI::App& sub) {
  json s = json::object();
  for (const CLI::Option* o : sub.get_options()) {
    if (o->get_name() == "--help") continue;
    std::string key = o->get_name(false, true);
    if (o->count() > 0) {
      auto r = o->results();
      s[key] = r.size() == 1 ? json(r[0]) : json(r);
    } else {
      s[key] = o->get_default_str();
    }
  }
  return s;
}

inline std::shared_ptr<const ComponentRegistry> load_registry(const std::string& path) {
  return std::make_shared<const ComponentRegistry>(load_components(path));
}

inline std::string fold_rows(const std::vector<FoldResult>& folds) {
  std::string out =
      "solute_id,solvent_id,temperature_K,exp_ln_d,pred_ln_d,pred_ln_std,are,"
      "segwe_ln_d,prior_only\n";
  for (auto& f : folds)
    for (auto& p : f.points)
      out += std::to_string(f.solute_id) + "," + std::to_string(f.solvent_id) + "," +
             format_double(p.temperature) + "," + format_double(p.exp_ln) + "," +
             format_double(p.pred_ln) + "," + format_double(p.pred_std) + "," +
             format_double(p.are) + "," +
             (p.baseline_ln ? format_double(*p.baseline_ln) : std::string()) + "," +
             (f.prior_only ? "1" : "0") + "\n";
  return out;
}

inline json metrics_json(const MetricSummary& m) {
  return {{"count", m.count}, {"rmae", m.rmae}, {"rmse", m.rmse}};
}

inline json summary_json(const LooSummary& s) {
  json per = json::object(), base = json::object();
  for (auto& [t, m] : s.per_temperature) per[format_double(t)] = metrics_json(m);
  for (auto& [t, m] : s.baseline_per_temperature) base[format_double(t)] = metrics_json(m);
  json j = {{"folds", s.folds},
            {"prior_only_folds", s.prior_only_folds},
            {"overall", metrics_json(s.overall)},
            {"per_temperature", per}};
  if (s.baseline_overall) {
    j["segwe_overall"] = metrics_json(*s.baseline_overall);
    j["segwe_per_temperature"] = base;
  }
  return j;
}

class Runner {
 public:
  Runner(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(const std::vector<std::string>& args) {
    CLI::App app{"difftensor: diffusion-coefficient prediction by hybrid Bayesian "
                 "matrix and tensor completion"};
    app.set_version_flag("--version", kVersion);
    app.set_config("--config", "", "INI configuration file");
    app.fallthrough();
    app.require_subcommand(1, 1);
    app.add_option("--out", g_.out, "output directory")->envname("DIFFTENSOR_OUT");
    app.add_option("--jobs", g_.jobs, "worker threads for folds and sweeps")
        ->envname("DIFFTENSOR_JOBS")
        ->check(CLI::PositiveNumber);
    app.add_option("--seed", g_.seed, "master seed")->envname("DIFFTENSOR_SEED");

    ModelOptions mo;
    std::string components, observations, checkpoint_path, initial, attenuation,
        metadata, solutes, solvents, ranks_grid = "3", strategy = "uncertainty",
        data_dir = "difftensor-data", host = "127.0.0.1", manifest_path;
    int solute = 0, solvent = 0, port = 8080;
    double temp = 298.0, initial_fraction = 0.5;
    bool allow_extrapolation = false, unweighted = false;
    std::size_t rounds = 10, threshold = 3, seeds = 1;

    auto* segwe_cmd = app.add_subcommand("segwe-predict", "SEGWE predictions for a registry");
    segwe_cmd->add_option("--components", components, "components.csv")->required();
    segwe_cmd->add_option("--temps", mo.temps, "temperatures in K");
    segwe_cmd->add_option("--solutes", solutes, "solute ids (default: all)");
    segwe_cmd->add_option("--solvents", solvents, "solvent ids (default: all)");
    segwe_cmd->add_option("--rho", mo.rho, "effective density, kg/m^3");

    auto* train_cmd = app.add_subcommand("train", "train an MCM or TCM");
    train_cmd->add_option("--components", components, "components.csv")->required();
    train_cmd->add_option("--observations", observations, "observations.csv")->required();
    mo.add(train_cmd);

    auto* predict_cmd = app.add_subcommand("predict", "predict one system from a checkpoint");
    predict_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint.json")->required();
    predict_cmd->add_option("--solute", solute, "solute id")->required();
    predict_cmd->add_option("--solvent", solvent, "solvent id")->required();
    predict_cmd->add_option("--temp", temp, "temperature, K")->required();
    predict_cmd->add_flag("--allow-extrapolation", allow_extrapolation,
                          "permit temperatures outside the validated range");
    predict_cmd->add_option("--samples", mo.samples, "Monte-Carlo samples");

    auto* loo_cmd = app.add_subcommand("loo-eval", "leave-one-out evaluation");
    loo_cmd->add_option("--components", components, "components.csv")->required();
    loo_cmd->add_option("--observations", observations, "observations.csv")->required();
    mo.add(loo_cmd);

    auto* sweep_cmd = app.add_subcommand("sweep", "TCM rank sweep by LOO rMAE");
    sweep_cmd->add_option("--components", components, "components.csv")->required();
    sweep_cmd->add_option("--observations", observations, "observations.csv")->required();
    sweep_cmd->add_option("--ranks", ranks_grid,
                          "max rank R (all of [1,R]^3) or list 'a,b,c;d,e,f'");
    mo.add(sweep_cmd, false);

    auto* al_cmd = app.add_subcommand("al-simulate", "simulated active-learning campaign");
    al_cmd->add_option("--components", components, "components.csv")->required();
    al_cmd->add_option("--observations", observations, "oracle observations.csv")->required();
    al_cmd->add_option("--initial", initial, "initial training observations.csv");
    al_cmd->add_option("--initial-fraction", initial_fraction,
                       "fraction of oracle pairs in the initial set (without --initial)");
    al_cmd->add_option("--rounds", rounds, "selection rounds");
    al_cmd->add_option("--strategy", strategy, "uncertainty or random")
        ->check(CLI::IsMember({"uncertainty", "random"}));
    al_cmd->add_option("--threshold", threshold,
                       "consecutive selections before exclusion (0: never)");
    al_cmd->add_option("--seeds", seeds, "independent runs; run s uses seed + s");
    mo.add(al_cmd, false);

    auto* nmr_cmd = app.add_subcommand("nmr-fit", "reduce PFG-NMR attenuation data");
    nmr_cmd->add_option("--attenuation", attenuation, "attenuation.csv")->required();
    nmr_cmd->add_option("--metadata", metadata, "series metadata JSON")->required();
    nmr_cmd->add_flag("--unweighted", unweighted, "unweighted dilution extrapolation");

    auto* serve_cmd = app.add_subcommand("serve", "run the HTTP service");
    serve_cmd->add_option("--port", port, "TCP port");
    serve_cmd->add_option("--host", host, "bind address");
    serve_cmd->add_option("--data-dir", data_dir, "persistent state directory");

    auto* rerun_cmd = app.add_subcommand("rerun", "re-execute a run from its manifest");
    rerun_cmd->add_option("manifest", manifest_path, "manifest.json")->required();

    for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; }))
      for (CLI::Option* o : sub->get_options()) {
        if (o->get_name() == "--help" || o->get_positional()) continue;
        std::string env = "DIFFTENSOR_" + o->get_name(false, true).substr(2);
        for (auto& c : env) c = c == '-' ? '_' : static_cast<char>(std::toupper(c));
        o->envname(env);
      }

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
      app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e, out_, err_);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e, out_, err_);
    } catch (const CLI::CallForVersion& e) {
      return app.exit(e, out_, err_);
    } catch (const CLI::ParseError& e) {
      err_ << "error: " << e.what() << "\n\n" << app.help();
      return 1;
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    try {
      if (name == "rerun") return rerun(manifest_path);
      fs::create_directories(g_.out);
      Manifest m;
      std::vector<std::string> outputs;
      if (name == "segwe-predict") {
        m.input("components", components);
        outputs = segwe_predict(components, mo, solutes, solvents);
      } else if (name == "train") {
        m.input("components", components);
        m.input("observations", observations);
        outputs = train(components, observations, mo);
      } else if (name == "predict") {
        m.input("checkpoint", checkpoint_path);
        outputs = predict(checkpoint_path, solute, solvent, temp, allow_extrapolation, mo);
      } else if (name == "loo-eval") {
        m.input("components", components);
        m.input("observations", observations);
        outputs = loo_eval(components, observations, mo);
      } else if (name == "sweep") {
        m.input("components", components);
        m.input("observations", observations);
        outputs = sweep(components, observations, ranks_grid, mo);
      } else if (name == "al-simulate") {
        m.input("components", components);
        m.input("observations", observations);
        if (!initial.empty()) m.input("initial", initial);
        outputs = al_simulate(components, observations, initial, initial_fraction, rounds,
                              strategy, threshold, seeds, mo);
      } else if (name == "nmr-fit") {
        m.input("attenuation", attenuation);
        m.input("metadata", metadata);
        outputs = nmr_fit(attenuation, metadata, unweighted);
      } else if (name == "serve") {
        m.write(g_, name, resolved_args(app, *sub, g_), settings_json(*sub), {});
        return serve(host, port, data_dir);
      }
      m.write(g_, name, resolved_args(app, *sub, g_), settings_json(*sub), outputs);
      return 0;
    } catch (const Error& e) {
      err_ << "error: " << e.what() << "\n";
      return e.exit_code();
    } catch (const std::exception& e) {
      err_ << "error: " << e.what() << "\n";
      return 1;
    }
  }

 private:
  std::string out_path(const std::string& file) const {
    return (fs::path(g_.out) / file).string();
  }

  std::vector<std::string> segwe_predict(const std::string& components,
                                         const ModelOptions& mo, const std::string& solutes,
                                         const std::string& solvents) {
    auto reg = load_registry(components);
    auto su = solutes.empty() ? reg->solute_ids() : parse_id_list(solutes);
    auto sv = solvents.empty() ? reg->solvent_ids() : parse_id_list(solvents);
    for (int id : su)
      if (!reg->contains(id) || !is_solute(reg->at(id).role))
        throw ValidationError("unknown solute id " + std::to_string(id));
    for (int id : sv)
      if (!reg->contains(id) || !is_solvent(reg->at(id).role))
        throw ValidationError("unknown solvent id " + std::to_string(id));
    auto temps = mo.grid();
    DenseTensor t = segwe::synthetic_tensor(*reg, su, sv, temps, mo.rho);
    std::string csv = "solute_id,solvent_id,temperature_K,d_m2_s,ln_d\n";
    for (std::size_t i = 0; i < su.size(); ++i)
      for (std::size_t j = 0; j < sv.size(); ++j)
        for (std::size_t k = 0; k < temps.size(); ++k)
          csv += std::to_string(su[i]) + "," + std::to_string(sv[j]) + "," +
                 format_double(temps[k]) + "," + format_double(std::exp(t(i, j, k))) +
                 "," + format_double(t(i, j, k)) + "\n";
    write_file(out_path("segwe_predictions.csv"), csv);
    out_ << "wrote " << su.size() * sv.size() * temps.size() << " predictions to "
         << out_path("segwe_predictions.csv") << "\n";
    return {"segwe_predictions.csv"};
  }

  static std::string trace_rows(const std::string& step, const std::vector<double>& trace) {
    std::string out;
    for (std::size_t k = 0; k < trace.size(); ++k)
      out += step + "," + std::to_string(k + 1) + "," + format_double(trace[k]) + "\n";
    return out;
  }

  std::vector<std::string> train(const std::string& components,
                                 const std::string& observations, const ModelOptions& mo) {
    auto reg = load_registry(components);
    auto tensor = load_observations(observations, reg, mo.grid());
    if (tensor.empty()) throw ValidationError("no observations on the temperature grid");
    HybridConfig hc = mo.hybrid(g_.seed);
    Checkpoint c;
    c.registry_hash = hex64(reg->hash());
    c.solute_ids = tensor.solute_ids();
    c.solvent_ids = tensor.solvent_ids();
    std::string trace = "step,iteration,elbo\n";
    json info;
    if (mo.model == "mcm") {
      auto slab = tensor.temperature_index(mo.slab_temp);
      if (!slab) throw ValidationError("--slab-temp is not on the temperature grid");
      McmShape shape{tensor.n_solutes(), tensor.n_solvents(), mo.mcm_rank()};
      Dataset exp = to_dataset(tensor, *slab);
      Dataset syn;
      if (hc.use_synthetic) {
        auto full = segwe::synthetic_tensor(*reg, tensor.solute_ids(), tensor.solvent_ids(),
                                            {tensor.temperatures()[*slab]}, mo.rho);
        syn = to_dataset(full);
      }
      auto r = hybrid_train(shape, syn, exp, hc);
      trace += trace_rows("1", r.step1_trace) + trace_rows("2", r.step2_trace);
      info = {{"step1_converged", r.step1_status == FitStatus::converged},
              {"step2_converged", r.step2_status == FitStatus::converged},
              {"ln_offset", r.factors.offset}};
      c.temperatures = {tensor.temperatures()[*slab]};
      c.factors = std::move(r.factors);
    } else {
      TcmShape shape{tensor.n_solutes(), tensor.n_solvents(), tensor.n_temps(),
                     parse_ranks(mo.rank)};
      Dataset exp = to_dataset(tensor);
      Dataset syn;
      if (hc.use_synthetic) syn = to_dataset(segwe::synthetic_tensor(tensor, mo.rho));
      auto r = hybrid_train(shape, syn, exp, hc);
      trace += trace_rows("1", r.step1_trace) + trace_rows("2", r.step2_trace);
      info = {{"step1_converged", r.step1_status == FitStatus::converged},
              {"step2_converged", r.step2_status == FitStatus::converged},
              {"ln_offset", r.factors.offset}};
      c.temperatures = tensor.temperatures();
      c.factors = std::move(r.factors);
    }
    std::vector<std::string> outputs = {"checkpoint.json", "elbo_trace.csv",
                                        "training_summary.json"};
    write_file(out_path("checkpoint.json"), serialize_checkpoint(c));
    write_file(out_path("elbo_trace.csv"), trace);
    if (c.kind() == ModelKind::tcm && c.temperatures.size() >= 2) {
      auto lin = fit_w_linear(c.tcm(), c.temperatures);
      std::string rows = "gamma,A,B,R2,MSE\n";
      for (std::size_t k = 0; k < lin.dims.size(); ++k)
        rows += format_regression_row(k + 1, lin.dims[k]) + "\n";
      write_file(out_path("temperature_model.csv"), rows);
      outputs.push_back("temperature_model.csv");
    }
    info["model"] = to_string(c.kind());
    info["training_points"] = tensor.size();
    info["checkpoint_hash"] = checkpoint_hash(c);
    write_file(out_path("training_summary.json"), info.dump(1) + "\n");
    out_ << "trained " << to_string(c.kind()) << " on " << tensor.size()
         << " points; checkpoint " << out_path("checkpoint.json") << "\n";
    return outputs;
  }

  std::vector<std::string> predict(const std::string& path, int solute, int solvent,
                                   double temp, bool allow, const ModelOptions& mo) {
    Checkpoint c = load_checkpoint(path);
    auto p = predict_point(c, solute, solvent, temp, allow, mo.samples,
                           kDefaultPredictionSeed);
    auto [lo, hi] = p.interval95();
    json j = {{"solute_id", solute},      {"solvent_id", solvent},
              {"temperature", temp},      {"d_mean", p.d_mean()},
              {"ln_d_mean", p.ln_d_mean}, {"ln_d_std", p.ln_d_std},
              {"d_lo95", lo},             {"d_hi95", hi},
              {"on_grid", p.on_grid}};
    write_file(out_path("prediction.json"), j.dump(1) + "\n");
    out_ << "D = " << format_double(p.d_mean()) << " m^2/s  sigma_ln = "
         << format_double(p.ln_d_std) << "  95% [" << format_double(lo) << ", "
         << format_double(hi) << "] m^2/s\n";
    return {"prediction.json"};
  }

  LooConfig loo_config(const ModelOptions& mo) const {
    LooConfig cfg;
    cfg.hybrid = mo.hybrid(g_.seed);
    cfg.n_samples = mo.samples;
    cfg.jobs = g_.jobs;
    if (mo.model == "mcm") cfg.mcm_rank = mo.mcm_rank();
    else cfg.ranks = parse_ranks(mo.rank);
    return cfg;
  }

  std::vector<std::string> loo_eval(const std::string& components,
                                    const std::string& observations, const ModelOptions& mo) {
    auto reg = load_registry(components);
    auto tensor = load_observations(observations, reg, mo.grid());
    if (tensor.empty()) throw ValidationError("no observations on the temperature grid");
    LooConfig cfg = loo_config(mo);
    std::optional<DenseTensor> syn;
    if (cfg.hybrid.use_synthetic) syn = segwe::synthetic_tensor(tensor, mo.rho);
    const DenseTensor* sp = syn ? &*syn : nullptr;
    std::vector<FoldResult> folds;
    if (mo.model == "mcm") {
      auto slab = tensor.temperature_index(mo.slab_temp);
      if (!slab) throw ValidationError("--slab-temp is not on the temperature grid");
      folds = loo_mcm(tensor, *slab, sp, cfg);
    } else {
      folds = loo_tcm(tensor, sp, cfg);
    }
    if (folds.empty()) throw ValidationError("no folds to evaluate");
    json summary = summary_json(summarize(folds));
    summary["model"] = mo.model;
    summary["seed"] = g_.seed;
    std::vector<std::string> outputs = {"folds.csv", "summary.json"};
    if (mo.model == "tcm" && !tensor.continuous().empty() && tensor.n_temps() >= 2) {
      // Full-data model evaluated on the off-grid observations.
      TcmShape shape{tensor.n_solutes(), tensor.n_solvents(), tensor.n_temps(), cfg.ranks};
      Dataset syn_d = sp ? to_dataset(*sp) : Dataset{};
      auto r = hybrid_train(shape, syn_d, to_dataset(tensor), cfg.hybrid);
      auto lin = fit_w_linear(r.factors, tensor.temperatures());
      auto pts = continuous_errors(r.factors, lin, tensor, cfg.n_samples, cfg.prediction_seed);
      std::string csv = "solute_id,solvent_id,temperature_K,exp_ln_d,pred_ln_d,pred_ln_std,are,segwe_ln_d\n";
      std::vector<double> ares, base;
      std::vector<TemperatureError> te;
      for (auto& p : pts) {
        csv += std::to_string(p.solute_id) + "," + std::to_string(p.solvent_id) + "," +
               format_double(p.temperature) + "," + format_double(p.exp_ln) + "," +
               format_double(p.pred_ln) + "," + format_double(p.pred_std) + "," +
               format_double(p.are) + "," +
               (p.baseline_ln ? format_double(*p.baseline_ln) : std::string()) + "\n";
        ares.push_back(p.are);
        te.push_back({p.temperature, p.are});
        if (p.baseline_ln) base.push_back(are_from_ln(*p.baseline_ln, p.exp_ln));
      }
      write_file(out_path("continuous.csv"), csv);
      outputs.push_back("continuous.csv");
      if (!ares.empty()) {
        summary["continuous"] = {{"count", ares.size()}, {"rmae", rmae(ares)}, {"rmse", rmse(ares)}};
        if (!base.empty())
          summary["continuous_segwe"] = {{"count", base.size()}, {"rmae", rmae(base)},
                                         {"rmse", rmse(base)}};
        std::string bins = "t_lo,t_hi,count,q1,median,q3,whisker_lo,whisker_hi\n";
        for (auto& b : bin_errors(te)) {
          bins += format_double(b.lo) + "," + format_double(b.hi) + "," + std::to_string(b.count);
          if (b.box)
            bins += "," + format_double(b.box->q1) + "," + format_double(b.box->median) + "," +
                    format_double(b.box->q3) + "," + format_double(b.box->whisker_lo) + "," +
                    format_double(b.box->whisker_hi);
          else
            bins += ",,,,,";
          bins += "\n";
        }
        write_file(out_path("continuous_bins.csv"), bins);
        outputs.push_back("continuous_bins.csv");
      }
    }
    write_file(out_path("folds.csv"), fold_rows(folds));
    write_file(out_path("summary.json"), summary.dump(1) + "\n");
    out_ << "LOO rMAE " << format_double(summary["overall"]["rmae"].get<double>()) << " over "
         << folds.size() << " folds\n";
    return outputs;
  }

  std::vector<std::string> sweep(const std::string& components,
                                 const std::string& observations, const std::string& grid,
                                 ModelOptions mo) {
    mo.model = "tcm";
    auto reg = load_registry(components);
    auto tensor = load_observations(observations, reg, mo.grid());
    LooConfig cfg = loo_config(mo);
    std::optional<DenseTensor> syn;
    if (cfg.hybrid.use_synthetic) syn = segwe::synthetic_tensor(tensor, mo.rho);
    auto rows = hyperparameter_sweep(tensor, parse_rank_grid(grid), syn ? &*syn : nullptr, cfg);
    std::string csv = "r_u,r_v,r_w,rmae\n";
    const SweepRow* best = &rows.front();
    for (auto& r : rows) {
      csv += format_sweep_row(r) + "\n";
      if (r.rmae < best->rmae) best = &r;
    }
    write_file(out_path("sweep.csv"), csv);
    out_ << "best ranks (" << best->ranks.u << "," << best->ranks.v << "," << best->ranks.w
         << ") rMAE " << format_double(best->rmae) << "\n";
    return {"sweep.csv"};
  }

  std::vector<std::string> al_simulate(const std::string& components,
                                       const std::string& observations,
                                       const std::string& initial, double fraction,
                                       std::size_t rounds, const std::string& strategy,
                                       std::size_t threshold, std::size_t seeds,
                                       const ModelOptions& mo) {
    if (seeds < 1) throw ValidationError("--seeds must be >= 1");
    auto reg = load_registry(components);
    auto oracle = load_observations(observations, reg, mo.grid());
    std::optional<DenseTensor> syn;
    if (mo.synthetic == "segwe") syn = segwe::synthetic_tensor(oracle, mo.rho);
    std::string csv = std::string(kCurveHeader) + "\n";
    for (std::size_t s = 0; s < seeds; ++s) {
      const std::uint64_t seed = g_.seed + s;
      ObservationTensor init = oracle.empty_like();
      if (!initial.empty()) {
        init = load_observations(initial, reg, mo.grid());
      } else {
        if (!(fraction > 0 && fraction <= 1))
          throw ValidationError("--initial-fraction must be in (0, 1]");
        auto ps = oracle.pairs();
        std::vector<Pair> pairs(ps.begin(), ps.end());
        std::mt19937_64 rng(derive_seed(seed, 777));
        std::shuffle(pairs.begin(), pairs.end(), rng);
        std::size_t keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(fraction * pairs.size())));
        for (std::size_t k = 0; k < keep && k < pairs.size(); ++k)
          for (std::size_t t = 0; t < oracle.n_temps(); ++t)
            if (auto* o = oracle.find({pairs[k].first, pairs[k].second, t}))
              init.set({pairs[k].first, pairs[k].second, t}, *o);
      }
      CampaignConfig cfg;
      cfg.hybrid = mo.hybrid(seed);
      cfg.ranks = parse_ranks(mo.rank);
      cfg.threshold = threshold;
      cfg.strategy = parse_strategy(strategy);
      cfg.n_samples = mo.samples;
      cfg.seed = seed;
      auto curve = simulate_campaign(oracle, init, rounds, cfg, syn ? &*syn : nullptr);
      csv += format_curve_rows(curve, oracle, s, seed);
      auto& last = curve.points.back();
      out_ << "run " << s << " seed " << seed << ": " << curve.points.size() - 1
           << " rounds, final rMSE " << format_double(last.overall.rmse)
           << (curve.exhausted ? " (pool exhausted)" : "") << "\n";
    }
    write_file(out_path("learning_curve.csv"), csv);
    return {"learning_curve.csv"};
  }

  std::vector<std::string> nmr_fit(const std::string& attenuation, const std::string& metadata,
                                   bool unweighted) {
    json meta;
    try {
      meta = json::parse(read_file(metadata));
    } catch (const json::exception& e) {
      throw ParseError(std::string("metadata is not valid JSON: ") + e.what());
    }
    CsvTable t = parse_csv(read_file(attenuation));
    const auto c_id = t.column("series_id"), c_g = t.column("g_T_per_m"),
               c_r = t.column("intensity_ratio");
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> raw;
    for (auto& row : t.rows) {
      auto& [g, r] = raw[row.fields[c_id]];
      g.push_back(parse_double(row.fields[c_g], row.line, "g_T_per_m"));
      r.push_back(parse_double(row.fields[c_r], row.line, "intensity_ratio"));
    }
    struct Key {
      int solute, solvent;
      double temperature;
      auto operator<=>(const Key&) const = default;
    };
    std::map<Key, std::map<double, std::vector<nmr::StejskalFit>>> groups;
    std::string fits = "series_id,solute_id,solvent_id,temperature_K,concentration,d_m2_s,"
                       "sigma_d_m2_s,residual_rms,ratio_above_one\n";
    const json& series = meta.at("series");
    for (auto& [id, data] : raw) {
      if (!series.contains(id)) throw ValidationError("series '" + id + "' has no metadata");
      const json& s = series.at(id);
      nmr::AttenuationSeries a;
      a.gradients = data.first;
      a.ratios = data.second;
      try {
        a.delta = s.at("delta").get<double>();
        a.big_delta = s.at("big_delta").get<double>();
        a.tau = s.value("tau", 0.0);
        a.gamma = s.value("gamma", nmr::kProtonGyromagneticRatio);
      } catch (const json::exception& e) {
        throw ValidationError("series '" + id + "': " + e.what());
      }
      nmr::StejskalFit f;
      try {
        f = nmr::stejskal_fit(a);
      } catch (const Error& e) {
        throw ValidationError("series '" + id + "': " + e.what());
      }
      Key k{s.at("solute_id").get<int>(), s.at("solvent_id").get<int>(),
            s.at("temperature").get<double>()};
      double conc = s.at("concentration").get<double>();
      groups[k][conc].push_back(f);
      if (f.ratio_above_one) err_ << "warning: series '" << id << "' has I/I0 > 1\n";
      fits += id + "," + std::to_string(k.solute) + "," + std::to_string(k.solvent) + "," +
              format_double(k.temperature) + "," + format_double(conc) + "," +
              format_double(f.d) + "," + format_double(f.sigma_d) + "," +
              format_double(f.residual_rms) + "," + (f.ratio_above_one ? "1" : "0") + "\n";
    }
    std::string table = std::string(kObservationsHeader) + "\n";
    for (auto& [k, by_conc] : groups) {
      nmr::DilutionSeries ds;
      ds.temperature = k.temperature;
      for (auto& [conc, peaks] : by_conc) {
        auto avg = nmr::average_peaks(peaks);
        ds.concentrations.push_back(conc);
        ds.d.push_back(avg.d);
        ds.sigma.push_back(avg.sigma_d);
      }
      auto inf = nmr::extrapolate_infinite_dilution(ds, !unweighted);
      table += std::to_string(k.solute) + "," + std::to_string(k.solvent) + "," +
               format_double(k.temperature) + "," + format_double(inf.d_inf) + "," +
               format_double(inf.sigma_inf) + ",pfg-nmr\n";
      out_ << k.solute << " in " << k.solvent << " at " << format_double(k.temperature)
           << " K: " << nmr::format_table_value(inf.d_inf, inf.sigma_inf) << " 1e-9 m^2/s\n";
    }
    write_file(out_path("series_fits.csv"), fits);
    write_file(out_path("infinite_dilution.csv"), table);
    return {"series_fits.csv", "infinite_dilution.csv"};
  }

  int serve(const std::string& host, int port, const std::string& data_dir) {
    service::Service svc({data_dir, g_.seed});
    httplib::Server svr;
    svc.mount(svr);
    static std::atomic<httplib::Server*> active{nullptr};
    active = &svr;
    std::signal(SIGINT, [](int) {
      if (auto* s = active.load()) s->stop();
    });
    std::signal(SIGTERM, [](int) {
      if (auto* s = active.load()) s->stop();
    });
    out_ << "listening on http://" << host << ":" << port << "/v1\n" << std::flush;
    bool ok = svr.listen(host, port);
    active = nullptr;
    if (!ok) throw ConfigurationError("cannot listen on " + host + ":" + std::to_string(port));
    return 0;
  }

  /// Re-executes the recorded argv after checking that every input still
  /// hashes to its recorded value, then compares the output hashes.
  int rerun(const std::string& manifest_path) {
    json m;
    try {
      m = json::parse(read_file(manifest_path));
    } catch (const json::exception& e) {
      throw ParseError(std::string("manifest is not valid JSON: ") + e.what());
    }
    for (auto& [role, in] : m.at("inputs").items()) {
      std::string path = in.at("path").get<std::string>();
      if (hex64(fnv1a(read_file(path))) != in.at("fnv1a").get<std::string>())
        throw ValidationError("input '" + role + "' (" + path + ") changed since the run");
    }
    std::vector<std::string> argv = m.at("argv").get<std::vector<std::string>>();
    std::vector<std::string> full = {"--out", g_.out};
    full.insert(full.end(), argv.begin(), argv.end());
    std::ostringstream sink;
    Runner inner(sink, err_);
    int code = inner.run(full);
    if (code != 0) return code;
    int mismatches = 0;
    for (auto& [file, hash] : m.at("outputs").items()) {
      fs::path p = fs::path(g_.out) / file;
      bool same = fs::exists(p) && hex64(fnv1a(read_file(p.string()))) == hash.get<std::string>();
      out_ << (same ? "identical " : "DIFFERS   ") << file << "\n";
      mismatches += !same;
    }
    if (mismatches) {
      err_ << "error: " << mismatches << " output(s) differ from the manifest\n";
      return 2;
    }
    return 0;
  }

  std::ostream& out_;
  std::ostream& err_;
  Globals g_;
};

/// Entry point: argv without the program name.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  Runner r(out, err);
  return r.run(args);
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  return dispatch(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace difftensor::cli
