#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "pie/experiment.hpp"

using namespace pie;
using namespace pie::experiment;
using nlohmann::json;

namespace {

json base_config(const fs::path& out) {
  return json{{"world", {{"type", "latent"}, {"preset", "progression"}}},
              {"schedule", {{"type", "stable_diffusion"}}},
              {"denoiser", {{"type", "oracle"}}},
              {"pie", {{"gamma", 0.5}, {"N", 4}, {"beta1", 1.0}, {"beta2", 1.0}}},
              {"seeds", {0, 1, 2}},
              {"reference_size", 20},
              {"output", out.string()}};
}

class Scratch : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("pie_experiment_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    unsetenv("PIE_SEED");
  }
  void TearDown() override {
    fs::remove_all(dir_);
    unsetenv("PIE_SEED");
  }

  fs::path write_config(const json& j, const std::string& name = "config.json") const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  static std::string slurp(const fs::path& p) { return read_text(p); }

  fs::path dir_;
};

int run_cli(const std::string& args) {
  const int status = std::system((std::string(PIE_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_F(Scratch, MissingScheduleNamesThePointer) {
  json j = base_config(dir_ / "out");
  j.erase("schedule");
  try {
    parse_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/schedule"), std::string::npos);
  }
}

TEST_F(Scratch, InvalidValuesAreConfigErrors) {
  json j = base_config(dir_ / "out");
  j["pie"]["gamma"] = 1.5;
  EXPECT_THROW(parse_config(j), ConfigError);
  j = base_config(dir_ / "out");
  j["sweep"] = {{"temperature", {1, 2}}};
  EXPECT_THROW(parse_config(j), ConfigError);
  j = base_config(dir_ / "out");
  j["denoiser"] = {{"type", "magic"}};
  EXPECT_THROW(parse_config(j), ConfigError);
  EXPECT_THROW(load_config(dir_ / "absent.json"), ConfigError);
}

TEST_F(Scratch, RelativePathsResolveAgainstConfigDir) {
  json j = base_config("unused");
  j["output"] = "results";
  const auto c = load_config(write_config(j));
  EXPECT_EQ(c.output, dir_ / "results");
}

TEST_F(Scratch, SeedEnvironmentOverride) {
  setenv("PIE_SEED", "42", 1);
  EXPECT_EQ(parse_config(base_config(dir_)).seeds, (std::vector<std::uint64_t>{42}));
  setenv("PIE_SEED", "x", 1);
  EXPECT_THROW(parse_config(base_config(dir_)), ConfigError);
}

TEST_F(Scratch, ZeroStepsGivesOneRowPerSeed) {
  json j = base_config(dir_ / "out");
  j["pie"]["N"] = 0;
  run_experiment(parse_config(j));
  const auto rows = pie::experiment::detail::read_csv(dir_ / "out" / "trajectories.csv");
  EXPECT_EQ(rows.size(), 3u);
  for (const auto& r : rows) EXPECT_EQ(r[1], "0");
}

TEST_F(Scratch, RerunsAreByteIdentical) {
  json j = base_config(dir_ / "a");
  j["compare"] = {"extrapolation", "interpolation"};
  run_experiment(parse_config(j));
  j["output"] = (dir_ / "b").string();
  run_experiment(parse_config(j));
  for (const char* f : {"trajectories.csv", "metrics.csv"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
  auto ra = json::parse(slurp(dir_ / "a" / "report.json"));
  auto rb = json::parse(slurp(dir_ / "b" / "report.json"));
  ra.erase("config");
  rb.erase("config");
  EXPECT_EQ(ra, rb);
}

TEST_F(Scratch, ReportIsIdempotent) {
  const auto c = parse_config(base_config(dir_ / "out"));
  run_experiment(c);
  const json first = report(c.output);
  const std::string bytes = slurp(c.output / "summary.json");
  const json second = report(c.output);
  EXPECT_EQ(first, second);
  EXPECT_EQ(bytes, slurp(c.output / "summary.json"));
}

TEST_F(Scratch, TheoryRunReportsBounds) {
  json j = base_config(dir_ / "out");
  j["method"] = "theory";
  j["pie"] = {{"N", 50}, {"noise_mode", "zero"}};
  run_experiment(parse_config(j));
  const json s = report(dir_ / "out");
  EXPECT_EQ(s["prop2_violations"], 0);
  EXPECT_EQ(s["prop3_holds"], true);
  const auto results = check(dir_ / "out");
  for (const auto& r : results) EXPECT_TRUE(r.pass) << r.name << ": " << r.detail;
}

TEST_F(Scratch, EmptyDirectoryIsMissingArtifact) {
  EXPECT_THROW(report(dir_), MissingArtifact);
  EXPECT_THROW(report(dir_ / "nope"), MissingArtifact);
}

TEST_F(Scratch, SingleValueSweepMatchesRun) {
  json j = base_config(dir_ / "out");
  j["sweep"] = {{"gamma", {0.5}}};
  const auto c = parse_config(j);
  const json r = run_experiment(c);
  sweep(c, "gamma");
  const auto rows = pie::experiment::detail::read_csv(dir_ / "out" / "sweep_gamma.csv");
  bool seen = false;
  for (const auto& row : rows) {
    if (row[2] != "mean") continue;
    seen = true;
    EXPECT_EQ(pie::experiment::detail::parse_double(row[3]), r["final"]["conf_mean"].get<double>());
    EXPECT_EQ(pie::experiment::detail::parse_double(row[4]), r["final"]["similarity_mean"].get<double>());
    EXPECT_EQ(pie::experiment::detail::parse_double(row[5]), r["mmd_final"].get<double>());
  }
  EXPECT_TRUE(seen);
  EXPECT_THROW(sweep(c, "N"), ConfigError);
}

TEST_F(Scratch, CliExitCodes) {
  json bad = base_config(dir_ / "out");
  bad.erase("schedule");
  EXPECT_EQ(run_cli("run " + write_config(bad, "bad.json").string()), 2);
  EXPECT_EQ(run_cli("run " + (dir_ / "absent.json").string()), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);

  const fs::path good = write_config(base_config(dir_ / "out"));
  EXPECT_EQ(run_cli("run " + good.string()), 0);
  EXPECT_EQ(run_cli("report " + (dir_ / "out").string()), 0);
  EXPECT_EQ(run_cli("report " + (dir_ / "empty").string()), 3);

  // Frozen trajectories have no gamma trend.
  json flat = base_config(dir_ / "flat");
  flat["pie"]["beta1"] = 0.0;
  flat["pie"]["beta2"] = 0.0;
  flat["sweep"] = {{"gamma", {0.2, 0.5, 0.8}}};
  const fs::path flat_path = write_config(flat, "flat.json");
  EXPECT_EQ(run_cli("sweep " + flat_path.string() + " --grid gamma"), 0);
  EXPECT_EQ(run_cli("check " + (dir_ / "flat").string()), 4);
}

TEST_F(Scratch, CliHonoursSeedOverride) {
  const fs::path cfg = write_config(base_config(dir_ / "out"));
  ASSERT_EQ(std::system(("PIE_SEED=7 " + std::string(PIE_CLI_PATH) + " run " + cfg.string() + " > /dev/null").c_str()),
            0);
  const json r = json::parse(slurp(dir_ / "out" / "report.json"));
  EXPECT_EQ(r["seeds"], json::array({7}));
}
