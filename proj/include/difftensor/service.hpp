#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "difftensor/campaign.hpp"
#include "difftensor/checkpoint.hpp"
#include "difftensor/data_model.hpp"
#include "difftensor/error.hpp"
#include "difftensor/predict.hpp"
#include "difftensor/segwe.hpp"

namespace difftensor::service {

using nlohmann::json;
namespace fs = std::filesystem;

struct Options {
  std::string data_dir = "difftensor-data";
  std::uint64_t seed = 1;  // default campaign seed
};

enum class Status { idle, training, awaiting_measurement };

inline std::string to_string(Status s) {
  switch (s) {
    case Status::idle: return "idle";
    case Status::training: return "training";
    case Status::awaiting_measurement: return "awaiting_measurement";
  }
  return "idle";
}

/// Error carrying an HTTP status for the JSON error body.
struct HttpError : std::runtime_error {
  int status;
  json details;
  HttpError(int s, const std::string& what, json d = nullptr)
      : std::runtime_error(what), status(s), details(std::move(d)) {}
};

/// Writes `content` to a sibling temp file, then renames it over `path`.
inline void write_atomic(const fs::path& path, std::string_view content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw ValidationError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void append_line(const fs::path& path, const std::string& line) {
  std::FILE* f = std::fopen(path.c_str(), "ab");
  if (!f) throw ValidationError("cannot append to " + path.string());
  bool ok = std::fwrite(line.data(), 1, line.size(), f) == line.size() &&
            std::fputc('\n', f) != EOF && std::fflush(f) == 0;
  std::fclose(f);
  if (!ok) throw ValidationError("append failed: " + path.string());
}

struct StoredDataset {
  std::string id;
  std::string content_hash;
  std::string components_csv, observations_csv;
  std::vector<double> temperatures;

  std::shared_ptr<const ComponentRegistry> registry() const {
    return std::make_shared<const ComponentRegistry>(parse_components(components_csv));
  }
  ObservationTensor tensor() const {
    auto reg = registry();
    auto obs = parse_observations(observations_csv, *reg);
    return build_tensor(reg, obs, temperatures);
  }
};

inline std::string dataset_hash(std::string_view components, std::string_view observations) {
  std::string joined(components);
  joined.push_back('\0');
  joined += observations;
  return hex64(fnv1a(joined));
}

inline json occupancy_json(const ObservationTensor& t) {
  auto r = occupancy_stats(t);
  json slabs = json::array();
  for (auto& s : r.slabs)
    slabs.push_back({{"temperature", s.temperature},
                     {"count", s.count},
                     {"occupation_rate", s.occupation_rate},
                     {"n_solutes", s.n_solutes},
                     {"n_solvents", s.n_solvents}});
  return {{"slabs", slabs},
          {"total_count", r.total_count},
          {"total_cells", r.total_cells},
          {"total_rate", r.total_rate},
          {"continuous_points", t.continuous().size()},
          {"n_solutes", t.n_solutes()},
          {"n_solvents", t.n_solvents()}};
}

/// HTTP front end for datasets and live campaigns. Every accepted mutation
/// is written to disk before the response is sent.
class Service {
 public:
  explicit Service(Options o) : opt_(std::move(o)) {
    fs::create_directories(fs::path(opt_.data_dir) / "datasets");
    fs::create_directories(fs::path(opt_.data_dir) / "campaigns");
    recover();
  }

  ~Service() { join_all(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void mount(httplib::Server& svr) {
    svr.Get("/v1/spec", wrap([this](const httplib::Request&, json& out) {
              out = openapi();
              return 200;
            }));
    svr.Post("/v1/datasets", wrap([this](const httplib::Request& r, json& out) {
               return post_dataset(r, out);
             }));
    svr.Post("/v1/campaigns", wrap([this](const httplib::Request& r, json& out) {
               return post_campaign(r, out);
             }));
    svr.Get(R"(/v1/campaigns/([^/]+))",
            wrap([this](const httplib::Request& r, json& out) {
              auto s = session(r.matches[1]);
              std::lock_guard lock(s->m);
              out = status_json(*s);
              return 200;
            }));
    svr.Get(R"(/v1/campaigns/([^/]+)/uncertainty)",
            wrap([this](const httplib::Request& r, json& out) {
              return get_uncertainty(r, out);
            }));
    svr.Get(R"(/v1/campaigns/([^/]+)/next)",
            wrap([this](const httplib::Request& r, json& out) {
              return get_next(r, out);
            }));
    svr.Get(R"(/v1/campaigns/([^/]+)/checkpoint)",
            wrap([this](const httplib::Request& r, json& out) {
              auto s = session(r.matches[1]);
              std::lock_guard lock(s->m);
              require_ready(*s);
              out = to_json(s->engine->checkpoint());
              return 200;
            }));
    svr.Get(R"(/v1/campaigns/([^/]+)/predict)",
            wrap([this](const httplib::Request& r, json& out) {
              return get_predict(r, out);
            }));
    svr.Post(R"(/v1/campaigns/([^/]+)/measurements)",
             wrap([this](const httplib::Request& r, json& out) {
               return post_measurements(r, out);
             }));
  }

  const std::string& data_dir() const { return opt_.data_dir; }

  /// Blocks until no session is training (test and shutdown helper).
  void wait_idle() {
    for (;;) {
      bool busy = false;
      {
        std::lock_guard lock(mutex_);
        for (auto& [_, s] : sessions_) {
          std::lock_guard sl(s->m);
          busy = busy || s->status == Status::training;
        }
      }
      if (!busy) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }

 private:
  struct Session {
    std::string id, dataset_id, dataset_hash;
    CampaignConfig config;
    std::unique_ptr<CampaignEngine> engine;
    Status status = Status::idle;
    std::string error;
    std::mutex m;
    std::thread worker;
  };

  using Handler = std::function<int(const httplib::Request&, json&)>;

  static httplib::Server::Handler wrap(Handler h) {
    return [h](const httplib::Request& req, httplib::Response& res) {
      json out;
      int status = 500;
      try {
        status = h(req, out);
      } catch (const HttpError& e) {
        status = e.status;
        out = {{"error", e.what()}};
        if (!e.details.is_null()) out["errors"] = e.details;
      } catch (const json::exception& e) {
        status = 400;
        out = {{"error", std::string("malformed JSON request: ") + e.what()}};
      } catch (const Error& e) {
        status = 422;
        out = {{"error", e.what()}};
      } catch (const std::exception& e) {
        status = 500;
        out = {{"error", e.what()}};
      }
      res.status = status;
      res.set_content(out.dump(), "application/json");
    };
  }

  fs::path dataset_dir(const std::string& id) const {
    return fs::path(opt_.data_dir) / "datasets" / id;
  }
  fs::path campaign_dir(const std::string& id) const {
    return fs::path(opt_.data_dir) / "campaigns" / id;
  }

  std::shared_ptr<Session> session(const std::string& id) {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw HttpError(404, "unknown campaign '" + id + "'");
    return it->second;
  }

  StoredDataset dataset(const std::string& id) {
    std::lock_guard lock(mutex_);
    auto it = datasets_.find(id);
    if (it == datasets_.end()) throw HttpError(404, "unknown dataset '" + id + "'");
    return it->second;
  }

  static void require_ready(const Session& s) {
    if (s.status == Status::training)
      throw HttpError(409, "training in progress");
    if (!s.engine->trained())
      throw HttpError(409, s.error.empty() ? "model not trained" : s.error);
  }

  // --- datasets -----------------------------------------------------------

  int post_dataset(const httplib::Request& req, json& out) {
    if (!req.is_multipart_form_data())
      throw HttpError(400, "expected multipart/form-data");
    if (!req.has_file("components") || !req.has_file("observations"))
      throw HttpError(400, "multipart fields 'components' and 'observations' are required");
    StoredDataset d;
    d.components_csv = req.get_file_value("components").content;
    d.observations_csv = req.get_file_value("observations").content;
    d.temperatures = default_temperature_grid();
    if (req.has_file("temperatures"))
      d.temperatures = parse_double_list(req.get_file_value("temperatures").content);
    else if (req.has_param("temperatures"))
      d.temperatures = parse_double_list(req.get_param_value("temperatures"));

    std::shared_ptr<const ComponentRegistry> reg;
    try {
      reg = d.registry();
    } catch (const Error& e) {
      throw HttpError(422, "components.csv is invalid", json::array({e.what()}));
    }
    std::vector<std::string> errors;
    std::vector<Observation> obs;
    try {
      obs = parse_observations(d.observations_csv, *reg, &errors);
    } catch (const Error& e) {
      errors.push_back(e.what());
    }
    if (!errors.empty())
      throw HttpError(422, "observations.csv is invalid", json(errors));
    ObservationTensor tensor = build_tensor(reg, obs, d.temperatures);
    d.content_hash = dataset_hash(d.components_csv, d.observations_csv);
    {
      std::lock_guard lock(mutex_);
      d.id = "d" + std::to_string(next_dataset_++);
      auto dir = dataset_dir(d.id);
      fs::create_directories(dir);
      write_atomic(dir / "components.csv", d.components_csv);
      write_atomic(dir / "observations.csv", d.observations_csv);
      write_atomic(dir / "dataset.json",
                   json{{"id", d.id},
                        {"content_hash", d.content_hash},
                        {"temperatures", d.temperatures}}
                       .dump(1));
      datasets_[d.id] = d;
    }
    out = {{"dataset_id", d.id},
           {"content_hash", d.content_hash},
           {"occupancy", occupancy_json(tensor)}};
    return 201;
  }

  // --- campaigns ----------------------------------------------------------

  static std::optional<DenseTensor> synthetic_for(const CampaignConfig& cfg,
                                                  const ObservationTensor& t) {
    if (!cfg.hybrid.use_synthetic) return std::nullopt;
    return segwe::synthetic_tensor(t);
  }

  int post_campaign(const httplib::Request& req, json& out) {
    json body = json::parse(req.body);
    if (!body.contains("dataset_id")) throw HttpError(422, "dataset_id is required");
    StoredDataset d = dataset(body.at("dataset_id").get<std::string>());
    CampaignConfig base;
    base.seed = opt_.seed;
    CampaignConfig cfg = campaign_config_from_json(body.value("config", json::object()), base);
    ObservationTensor tensor = d.tensor();
    auto s = std::make_shared<Session>();
    s->dataset_id = d.id;
    s->dataset_hash = d.content_hash;
    s->config = cfg;
    s->engine = std::make_unique<CampaignEngine>(tensor, synthetic_for(cfg, tensor), cfg);
    {
      std::lock_guard lock(mutex_);
      s->id = "c" + std::to_string(next_campaign_++);
      fs::create_directories(campaign_dir(s->id));
      sessions_[s->id] = s;
    }
    std::lock_guard lock(s->m);
    persist(*s);
    start_training(s);
    out = status_json(*s);
    return 201;
  }

  json status_json(const Session& s) const {
    const auto& st = s.engine->state();
    json ex_su = json::array(), ex_sv = json::array();
    const auto& t = s.engine->training();
    for (auto i : st.pool.excluded_solutes) ex_su.push_back(t.solute_ids()[i]);
    for (auto j : st.pool.excluded_solvents) ex_sv.push_back(t.solvent_ids()[j]);
    json j = {{"campaign_id", s.id},
              {"dataset_id", s.dataset_id},
              {"dataset_hash", s.dataset_hash},
              {"status", to_string(s.status)},
              {"round", st.round},
              {"checkpoint_hash", st.checkpoint_hash},
              {"pool_size", st.pool.size()},
              {"excluded_solutes", ex_su},
              {"excluded_solvents", ex_sv},
              {"n_measurements", st.log.size()},
              {"n_training_points", t.size()},
              {"config", to_json(s.config)}};
    if (!s.error.empty()) j["error"] = s.error;
    return j;
  }

  int get_uncertainty(const httplib::Request& req, json& out) {
    auto s = session(req.matches[1]);
    std::lock_guard lock(s->m);
    require_ready(*s);
    const auto& map = s->engine->uncertainty();
    const auto& t = s->engine->training();
    json rows = json::array();
    for (std::size_t i = 0; i < map.n_solutes; ++i) {
      json row = json::array();
      for (std::size_t j = 0; j < map.n_solvents; ++j) row.push_back(map(i, j));
      rows.push_back(row);
    }
    json pool = json::array();
    for (auto& p : s->engine->state().pool.candidates) pool.push_back({p.first, p.second});
    out = {{"solute_ids", t.solute_ids()},
           {"solvent_ids", t.solvent_ids()},
           {"temperatures", t.temperatures()},
           {"values", rows},
           {"pool", pool},
           {"checkpoint_hash", s->engine->state().checkpoint_hash}};
    return 200;
  }

  int get_next(const httplib::Request& req, json& out) {
    auto s = session(req.matches[1]);
    std::lock_guard lock(s->m);
    require_ready(*s);
    if (s->engine->state().pool.empty()) throw HttpError(409, "sampling pool is exhausted");
    Pair p = s->engine->propose();
    const auto& t = s->engine->training();
    const auto& reg = *t.registry();
    json preds = json::array();
    for (std::size_t k = 0; k < t.n_temps(); ++k) {
      const auto& c = s->engine->completed()(p.first, p.second, k);
      preds.push_back({{"temperature", t.temperatures()[k]},
                       {"ln_d_mean", c.ln_d_mean},
                       {"ln_d_std", c.ln_d_std},
                       {"d_mean", std::exp(c.ln_d_mean)}});
    }
    const int su = t.solute_ids()[p.first], sv = t.solvent_ids()[p.second];
    out = {{"i", p.first},
           {"j", p.second},
           {"solute_id", su},
           {"solvent_id", sv},
           {"solute_name", reg.at(su).name},
           {"solvent_name", reg.at(sv).name},
           {"uncertainty", s->engine->uncertainty()(p.first, p.second)},
           {"round", s->engine->state().round},
           {"predictions", preds},
           {"checkpoint_hash", s->engine->state().checkpoint_hash}};
    return 200;
  }

  int get_predict(const httplib::Request& req, json& out) {
    auto s = session(req.matches[1]);
    std::lock_guard lock(s->m);
    require_ready(*s);
    for (auto* k : {"solute_id", "solvent_id", "temperature"})
      if (!req.has_param(k)) throw HttpError(422, std::string("query parameter ") + k + " is required");
    int su = static_cast<int>(parse_int(req.get_param_value("solute_id"), 0, "solute_id"));
    int sv = static_cast<int>(parse_int(req.get_param_value("solvent_id"), 0, "solvent_id"));
    double temp = parse_double(req.get_param_value("temperature"), 0, "temperature");
    bool allow = req.has_param("allow_extrapolation") &&
                 req.get_param_value("allow_extrapolation") == "true";
    auto p = predict_point(s->engine->checkpoint(), su, sv, temp, allow,
                           s->config.n_samples, s->config.prediction_seed);
    auto [lo, hi] = p.interval95();
    out = {{"solute_id", su},      {"solvent_id", sv},
           {"temperature", temp},  {"d_mean", p.d_mean()},
           {"ln_d_mean", p.ln_d_mean}, {"ln_d_std", p.ln_d_std},
           {"d_lo95", lo},         {"d_hi95", hi},
           {"on_grid", p.on_grid}};
    return 200;
  }

  int post_measurements(const httplib::Request& req, json& out) {
    auto s = session(req.matches[1]);
    json body = json::parse(req.body);
    std::lock_guard lock(s->m);
    if (s->status == Status::training) throw HttpError(409, "training in progress");
    const auto& t = s->engine->training();
    Pair p;
    if (body.contains("solute_id") && body.contains("solvent_id")) {
      auto i = t.solute_index(body.at("solute_id").get<int>());
      auto j = t.solvent_index(body.at("solvent_id").get<int>());
      if (!i || !j) throw HttpError(422, "unknown solute or solvent id");
      p = {*i, *j};
    } else if (body.contains("i") && body.contains("j")) {
      p = {body.at("i").get<std::size_t>(), body.at("j").get<std::size_t>()};
    } else {
      throw HttpError(422, "pair must be given as i/j or solute_id/solvent_id");
    }
    std::vector<MeasuredValue> values;
    for (auto& v : body.at("values")) {
      MeasuredValue mv;
      mv.temperature = v.at("temperature").get<double>();
      mv.d = v.at("d").get<double>();
      if (v.contains("sigma") && !v.at("sigma").is_null()) mv.sigma = v.at("sigma").get<double>();
      values.push_back(mv);
    }
    const bool partial = body.value("partial", false);
    const std::size_t before = s->engine->state().log.size();
    bool oob = s->engine->apply_measurements(p, values, partial);
    const auto& log = s->engine->state().log;
    for (std::size_t k = before; k < log.size(); ++k)
      append_line(campaign_dir(s->id) / "measurements.jsonl", to_json(log[k]).dump());
    persist(*s);
    start_training(s);
    out = status_json(*s);
    out["out_of_band"] = oob;
    return 202;
  }

  // --- persistence ----------------------------------------------------------

  void persist(const Session& s) {
    json j = {{"id", s.id},
              {"dataset_id", s.dataset_id},
              {"dataset_hash", s.dataset_hash},
              {"config", to_json(s.config)},
              {"state", to_json(s.engine->state())}};
    write_atomic(campaign_dir(s.id) / "session.json", j.dump(1));
  }

  /// Runs engine training on a worker; the caller holds s->m.
  void start_training(const std::shared_ptr<Session>& s) {
    if (s->worker.joinable()) s->worker.join();
    s->status = Status::training;
    s->error.clear();
    s->worker = std::thread([this, s] {
      std::string err;
      try {
        s->engine->train();
      } catch (const std::exception& e) {
        err = e.what();
      }
      std::lock_guard lock(s->m);
      s->error = err;
      bool ready = err.empty() && !s->engine->state().pool.empty();
      if (err.empty() && s->engine->state().pool.empty()) s->error = "sampling pool is exhausted";
      s->status = ready ? Status::awaiting_measurement : Status::idle;
      if (err.empty()) {
        try {
          persist(*s);
        } catch (const std::exception& e) {
          s->error = e.what();
        }
      }
    });
  }

  void join_all() {
    std::vector<std::shared_ptr<Session>> all;
    {
      std::lock_guard lock(mutex_);
      for (auto& [_, s] : sessions_) all.push_back(s);
    }
    for (auto& s : all) {
      std::thread t;
      {
        std::lock_guard lock(s->m);
        t = std::move(s->worker);
      }
      if (t.joinable()) t.join();
    }
  }

  static std::size_t numeric_suffix(const std::string& id) {
    try {
      return static_cast<std::size_t>(std::stoull(id.substr(1)));
    } catch (...) {
      return 0;
    }
  }

  /// Reloads datasets and sessions. Log lines past the last snapshot are
  /// replayed with their recorded in/out-of-band decision, then each session
  /// retrains deterministically.
  void recover() {
    for (auto& e : fs::directory_iterator(fs::path(opt_.data_dir) / "datasets")) {
      if (!fs::exists(e.path() / "dataset.json")) continue;
      json meta = json::parse(read_file((e.path() / "dataset.json").string()));
      StoredDataset d;
      d.id = meta.at("id").get<std::string>();
      d.content_hash = meta.at("content_hash").get<std::string>();
      d.temperatures = meta.at("temperatures").get<std::vector<double>>();
      d.components_csv = read_file((e.path() / "components.csv").string());
      d.observations_csv = read_file((e.path() / "observations.csv").string());
      next_dataset_ = std::max(next_dataset_, numeric_suffix(d.id) + 1);
      datasets_[d.id] = std::move(d);
    }
    for (auto& e : fs::directory_iterator(fs::path(opt_.data_dir) / "campaigns")) {
      if (!fs::exists(e.path() / "session.json")) continue;
      json j = json::parse(read_file((e.path() / "session.json").string()));
      auto s = std::make_shared<Session>();
      s->id = j.at("id").get<std::string>();
      s->dataset_id = j.at("dataset_id").get<std::string>();
      s->dataset_hash = j.at("dataset_hash").get<std::string>();
      s->config = campaign_config_from_json(j.at("config"));
      auto it = datasets_.find(s->dataset_id);
      if (it == datasets_.end()) continue;
      ObservationTensor tensor = it->second.tensor();
      s->engine = std::make_unique<CampaignEngine>(tensor, synthetic_for(s->config, tensor),
                                                   s->config);
      CampaignState st = campaign_state_from_json(j.at("state"));
      std::vector<MeasurementRecord> logged;
      if (fs::exists(e.path() / "measurements.jsonl")) {
        std::ifstream in(e.path() / "measurements.jsonl");
        for (std::string line; std::getline(in, line);)
          if (!trim(line).empty()) logged.push_back(measurement_from_json(json::parse(line)));
      }
      s->engine->restore(st);
      // Replay acknowledged records that the snapshot does not yet contain.
      for (std::size_t k = st.log.size(); k < logged.size();) {
        const auto& first = logged[k];
        std::vector<MeasuredValue> values;
        std::size_t end = k;
        while (end < logged.size() && logged[end].i == first.i && logged[end].j == first.j &&
               logged[end].timestamp == first.timestamp) {
          values.push_back({logged[end].temperature, logged[end].d, logged[end].sigma});
          ++end;
        }
        s->engine->apply_measurements({first.i, first.j}, values, true,
                                      first.out_of_band, first.timestamp);
        k = end;
      }
      next_campaign_ = std::max(next_campaign_, numeric_suffix(s->id) + 1);
      sessions_[s->id] = s;
      std::lock_guard lock(s->m);
      persist(*s);
      start_training(s);
    }
  }

  json openapi() const {
    auto op = [](const char* summary, json responses) {
      return json{{"summary", summary}, {"responses", responses}};
    };
    json ok = {{"200", {{"description", "OK"}}}};
    json paths;
    paths["/v1/spec"]["get"] = op("This OpenAPI document", ok);
    paths["/v1/datasets"]["post"] =
        op("Upload components.csv and observations.csv (multipart fields "
           "'components', 'observations'; optional 'temperatures')",
           {{"201", {{"description", "dataset id, content hash, occupancy"}}},
            {"422", {{"description", "per-row validation messages"}}}});
    paths["/v1/campaigns"]["post"] =
        op("Start a campaign {dataset_id, config}",
           {{"201", {{"description", "campaign status"}}},
            {"404", {{"description", "unknown dataset"}}}});
    paths["/v1/campaigns/{id}"]["get"] = op("Campaign status", ok);
    paths["/v1/campaigns/{id}/uncertainty"]["get"] =
        op("Temperature-averaged predictive std per pair",
           {{"200", {{"description", "matrix"}}}, {"409", {{"description", "training"}}}});
    paths["/v1/campaigns/{id}/next"]["get"] =
        op("Proposed pair with predictions at each grid temperature",
           {{"200", {{"description", "proposal"}}}, {"409", {{"description", "training"}}}});
    paths["/v1/campaigns/{id}/checkpoint"]["get"] = op("Current model checkpoint", ok);
    paths["/v1/campaigns/{id}/predict"]["get"] =
        op("Prediction for solute_id, solvent_id, temperature", ok);
    paths["/v1/campaigns/{id}/measurements"]["post"] =
        op("Submit {i, j | solute_id, solvent_id, values: [{temperature, d, "
           "sigma}], partial}",
           {{"202", {{"description", "accepted; retraining started"}}},
            {"404", {{"description", "unknown campaign"}}},
            {"409", {{"description", "training in progress"}}},
            {"422", {{"description", "invalid values"}}}});
    return {{"openapi", "3.0.3"},
            {"info", {{"title", "difftensor"}, {"version", "1"}}},
            {"paths", paths}};
  }

  Options opt_;
  std::mutex mutex_;
  std::map<std::string, StoredDataset> datasets_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::size_t next_dataset_ = 1, next_campaign_ = 1;
};

}  // namespace difftensor::service
