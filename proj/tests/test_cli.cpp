#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <sys/wait.h>

#include "difftensor/cli.hpp"
#include "support/server.hpp"

using namespace difftensor;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kFixtures = DIFFTENSOR_FIXTURES;

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

int run_binary(const std::string& args) {
  int st = std::system((std::string(DIFFTENSOR_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::vector<std::string> data_args() {
  return {"--components", kFixtures + "/components.csv", "--observations",
          kFixtures + "/observations.csv"};
}

std::vector<std::string> join(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(Cli, HelpVersionAndUsageErrors) {
  EXPECT_EQ(run_binary("--help"), 0);
  EXPECT_EQ(run_binary("train --help"), 0);
  EXPECT_EQ(run_binary("--version"), 0);
  EXPECT_EQ(run_binary(""), 1);
  EXPECT_EQ(run_binary("train --bogus"), 1);
  auto r = run({"segwe-predict"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_NE(r.err.find("--components"), std::string::npos);
}

TEST(Cli, MissingAndMalformedInputs) {
  const auto out = difftensor::testing::scratch_dir("cli-missing");
  auto r = run({"--out", out.string(), "segwe-predict", "--components", "/nonexistent.csv"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("/nonexistent.csv"), std::string::npos);
  write_file((out / "bad.csv").string(), "component_id,name\n1,x\n");
  r = run({"--out", out.string(), "segwe-predict", "--components", (out / "bad.csv").string()});
  EXPECT_NE(r.code, 0);
  r = run({"--out", out.string(), "train", "--components", kFixtures + "/components.csv",
           "--observations", kFixtures + "/observations.csv", "--rank", "2,2"});
  EXPECT_NE(r.code, 0);
}

TEST(Cli, SegwePredict) {
  const auto out = difftensor::testing::scratch_dir("cli-segwe");
  auto r = run({"--out", out.string(), "segwe-predict", "--components",
                kFixtures + "/components.csv", "--solutes", "1", "--solvents", "101",
                "--temps", "298"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto t = parse_csv(read_file((out / "segwe_predictions.csv").string()));
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_NEAR(std::stod(t.rows[0].fields[t.column("d_m2_s")]) / 1.0005380352861112e-09, 1.0,
              1e-5);
  json m = json::parse(read_file((out / "manifest.json").string()));
  EXPECT_EQ(m.at("tool"), "difftensor");
  EXPECT_TRUE(m.at("outputs").contains("segwe_predictions.csv"));
}

TEST(Cli, TrainThenPredict) {
  const auto out = difftensor::testing::scratch_dir("cli-train");
  auto r = run(join({"--out", out.string(), "--seed", "3", "train"},
                    join(data_args(), {"--max-iterations", "600", "--samples", "50"})));
  ASSERT_EQ(r.code, 0) << r.err;
  for (auto* f : {"checkpoint.json", "elbo_trace.csv", "temperature_model.csv",
                  "training_summary.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  auto lin = parse_csv(read_file((out / "temperature_model.csv").string()));
  EXPECT_EQ(lin.rows.size(), 2u);

  r = run({"--out", out.string(), "predict", "--checkpoint", (out / "checkpoint.json").string(),
           "--solute", "1", "--solvent", "101", "--temp", "305"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("95%"), std::string::npos);
  json p = json::parse(read_file((out / "prediction.json").string()));
  EXPECT_GT(p.at("d_mean").get<double>(), 1e-10);
  EXPECT_LT(p.at("d_mean").get<double>(), 1e-8);

  r = run({"--out", out.string(), "predict", "--checkpoint", (out / "checkpoint.json").string(),
           "--solute", "1", "--solvent", "101", "--temp", "400"});
  EXPECT_NE(r.code, 0);
}

TEST(Cli, NmrFitOnFixtures) {
  const auto out = difftensor::testing::scratch_dir("cli-nmr");
  auto r = run({"--out", out.string(), "nmr-fit", "--attenuation",
                kFixtures + "/attenuation.csv", "--metadata", kFixtures + "/nmr_metadata.json"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto t = parse_csv(read_file((out / "infinite_dilution.csv").string()));
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_NEAR(std::stod(t.rows[0].fields[t.column("d_m2_s")]) / 1e-9, 1.0, 1e-6);
  EXPECT_EQ(parse_csv(read_file((out / "series_fits.csv").string())).rows.size(), 6u);
}

TEST(Cli, LooEvalIsReproducibleAndRerunnable) {
  const auto a = difftensor::testing::scratch_dir("cli-loo-a");
  const auto b = difftensor::testing::scratch_dir("cli-loo-b");
  const auto c = difftensor::testing::scratch_dir("cli-loo-c");
  auto args = join({"loo-eval"}, join(data_args(), {"--rank", "1,1,1", "--max-iterations",
                                                     "300", "--samples", "30"}));
  ASSERT_EQ(run(join({"--out", a.string(), "--seed", "9"}, args)).code, 0);
  ASSERT_EQ(run(join({"--out", b.string(), "--seed", "9", "--jobs", "2"}, args)).code, 0);
  for (auto* f : {"folds.csv", "summary.json", "continuous.csv"})
    EXPECT_EQ(read_file((a / f).string()), read_file((b / f).string())) << f;
  auto folds = parse_csv(read_file((a / "folds.csv").string()));
  EXPECT_FALSE(folds.rows.empty());

  auto r = run({"--out", c.string(), "rerun", (a / "manifest.json").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("identical folds.csv"), std::string::npos);
  EXPECT_EQ(r.out.find("DIFFERS"), std::string::npos);

  write_file((c / "summary.json").string(), "{}");
  json m = json::parse(read_file((a / "manifest.json").string()));
  m["outputs"]["summary.json"] = "0000000000000000";
  write_file((c / "tampered.json").string(), m.dump());
  r = run({"--out", c.string(), "rerun", (c / "tampered.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("DIFFERS   summary.json"), std::string::npos);
}

TEST(Cli, EnvironmentSuppliesOptions) {
  const auto out = difftensor::testing::scratch_dir("cli-env");
  ::setenv("DIFFTENSOR_OUT", out.string().c_str(), 1);
  ::setenv("DIFFTENSOR_TEMPS", "313", 1);
  auto r = run({"segwe-predict", "--components", kFixtures + "/components.csv"});
  ::unsetenv("DIFFTENSOR_OUT");
  ::unsetenv("DIFFTENSOR_TEMPS");
  ASSERT_EQ(r.code, 0) << r.err;
  auto t = parse_csv(read_file((out / "segwe_predictions.csv").string()));
  ASSERT_FALSE(t.rows.empty());
  for (auto& row : t.rows) EXPECT_EQ(row.fields[t.column("temperature_K")], "313");
}
