// Copyright 2026 The Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "moespec/experiment.hpp"

using namespace moespec;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"({
  "preset": "mixtral-toy",
  "model": {"d": 16, "d_ff": 24, "vocab": 64, "num_layers": 2},
  "tree_sizes": [7, 15],
  "budgets": [2, 4, 8],
  "methods": ["static", "router", "oracle"],
  "policies": ["truncation", "substitution"],
  "seeds": [1, 2],
  "gen_len": 10,
  "prompts": 1,
  "prompt_length": 8,
  "trees": 3,
  "calibration_tokens": 64,
  "dump_steps": true
})";

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("moespec_test_experiment_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

std::string usage_message(const std::string& json_text) {
  try {
    apply_config_json(ExperimentConfig{}, nlohmann::json::parse(json_text)).validate();
  } catch (const UsageError& e) {
    return e.what();
  }
  return "";
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("config errors name the offending field") {
  CHECK(usage_message(R"({"budgets": []})").find("budgets") != std::string::npos);
  CHECK(usage_message(R"({"budgets": [999]})").find("budgets") != std::string::npos);
  CHECK(usage_message(R"({"seeds": []})").find("seeds") != std::string::npos);
  CHECK(usage_message(R"({"methods": ["magic"]})").find("magic") != std::string::npos);
  CHECK(usage_message(R"({"gen_len": 0})").find("gen_len") != std::string::npos);
  CHECK(usage_message(R"({"colour": 1})").find("colour") != std::string::npos);
  CHECK(usage_message(R"({"model": {"top_k": 100}})") != "");
  CHECK(usage_message(R"({"cost": {"bytes_shared": -1}})") != "");
  CHECK(usage_message(R"({"preset": "gpt-toy"})").find("gpt-toy") != std::string::npos);
  CHECK(usage_message(R"({"gen_len": "long"})").find("gen_len") != std::string::npos);
  CHECK(usage_message(R"({"tree_sizes": [10]})").find("tree_sizes") != std::string::npos);
}

TEST_CASE("config defaults and preset resolution") {
  ExperimentConfig d;
  CHECK_NOTHROW(d.validate());
  auto c = apply_config_json(d, nlohmann::json::parse(R"({"model": {"vocab": 32}, "preset": "mixtral-toy"})"));
  CHECK(c.model.num_experts == 8);
  CHECK(c.model.top_k == 2);
  CHECK(c.model.vocab == 32);
  auto echo = c.to_json();
  CHECK(echo["preset"] == "mixtral-toy");
  CHECK(!echo.contains("out_dir"));
  CHECK(!echo.contains("workers"));
  // The echo parses back to the same config.
  auto again = apply_config_json(ExperimentConfig{}, nlohmann::json::parse(echo.dump()));
  CHECK(again.to_json() == echo);
}

TEST_CASE("CLI usage errors exit with code 2") {
  auto dir = scratch("usage");
  CHECK(run_cli({"simulate", "--out-dir", dir.string(), "--budget", "0"}) == 2);
  CHECK(run_cli({"frobnicate"}) == 2);
  CHECK(run_cli({"simulate", "--method", "psychic", "--out-dir", dir.string()}) == 2);
  write_file(dir / "bad.json", "{ not json");
  CHECK(run_cli({"simulate", "--config", (dir / "bad.json").string()}) == 2);
  CHECK(run_cli({"simulate", "--config", (dir / "missing.json").string()}) == 2);
  write_file(dir / "empty_budgets.json", R"({"budgets": []})");
  CHECK(run_cli({"simulate", "--config", (dir / "empty_budgets.json").string(), "--out-dir",
                 dir.string()}) == 2);
  CHECK(!fs::exists(dir / "sweep.csv"));
}

TEST_CASE("command line overrides the config file") {
  auto dir = scratch("precedence");
  write_file(dir / "cfg.json", R"({"preset": "mixtral-toy", "model": {"vocab": 48}, "seed": 5,
    "budgets": [4], "tree_sizes": [7], "seeds": [1], "gen_len": 6, "prompts": 1, "trees": 2})");
  REQUIRE(run_cli({"simulate", "--config", (dir / "cfg.json").string(), "--seed", "9", "--budget",
                   "2,8", "--preset", "qwen3-toy", "--gen-len", "5", "--out-dir",
                   (dir / "out").string()}) == 0);
  auto summary = nlohmann::json::parse(slurp(dir / "out" / "summary.json"));
  CHECK(summary["header"]["seed"] == 9);
  CHECK(summary["header"]["config"]["budgets"] == nlohmann::json::array({2, 8}));
  CHECK(summary["header"]["config"]["gen_len"] == 5);
  CHECK(summary["header"]["config"]["preset"] == "qwen3-toy");
  CHECK(summary["header"]["config"]["model"]["num_experts"] == 128);
  CHECK(summary["header"]["config"]["model"]["vocab"] == 48);
  CHECK(summary["header"]["config"]["tree_sizes"] == nlohmann::json::array({7}));
  auto sweep = lines(slurp(dir / "out" / "sweep.csv"));
  CHECK(sweep[2] == "# seed: 9");
}

TEST_CASE("the mixtral preset runs with eight experts and top-2") {
  auto dir = scratch("mixtral");
  REQUIRE(run_cli({"simulate", "--preset", "mixtral-toy", "--tree-size", "7", "--budget", "4",
                   "--gen-len", "6", "--out-dir", dir.string()}) == 0);
  auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  CHECK(summary["header"]["config"]["model"]["num_experts"] == 8);
  CHECK(summary["header"]["config"]["model"]["top_k"] == 2);
  for (const auto& cell : summary["cells"]) CHECK(cell["max_unique"].get<int>() <= 8);
}

TEST_CASE("every command writes headed, schema-stable files deterministically") {
  auto base = scratch("determinism");
  write_file(base / "cfg.json", kSmallConfig);
  const std::vector<std::string> commands{"simulate",    "ablate",           "coverage",
                                          "coactivation", "reconstruct",     "calibrate-static",
                                          "export-model"};
  for (const auto& cmd : commands) {
    CAPTURE(cmd);
    std::vector<std::map<std::string, std::string>> runs;
    for (const char* workers : {"1", "4", "1"}) {
      fs::path out = base / (cmd + "_" + workers + "_" + std::to_string(runs.size()));
      REQUIRE(run_cli({cmd, "--config", (base / "cfg.json").string(), "--workers", workers,
                       "--out-dir", out.string()}) == 0);
      runs.push_back(snapshot(out));
    }
    REQUIRE(!runs[0].empty());
    CHECK(runs[0] == runs[1]);
    CHECK(runs[0] == runs[2]);
    for (const auto& [name, text] : runs[0]) {
      CAPTURE(name);
      if (name.ends_with(".csv")) {
        auto ls = lines(text);
        REQUIRE(ls.size() >= 5);
        CHECK(ls[0] == "# moespec 0.1.0");
        CHECK(ls[1] == "# command: " + cmd);
        CHECK(ls[2] == "# seed: 0");
        CHECK(ls[3].rfind("# config: {", 0) == 0);
      } else if (name.ends_with(".json")) {
        auto j = nlohmann::json::parse(text);
        CHECK(j["header"]["tool"] == "moespec");
        CHECK(j["header"]["version"] == "0.1.0");
        CHECK(j["header"]["command"] == cmd);
        CHECK(j["header"]["config"]["preset"] == "mixtral-toy");
      } else if (name.ends_with(".jsonl")) {
        auto head = nlohmann::json::parse(lines(text).front());
        CHECK(head["header"]["command"] == cmd);
      }
    }
  }
}

TEST_CASE("frozen CSV column rows") {
  auto base = scratch("schemas");
  write_file(base / "cfg.json", kSmallConfig);
  auto column_row = [&](const std::string& cmd, const std::string& file) {
    fs::path out = base / cmd;
    REQUIRE(run_cli({cmd, "--config", (base / "cfg.json").string(), "--out-dir", out.string()}) == 0);
    return lines(slurp(out / file)).at(4);
  };
  CHECK(column_row("simulate", "sweep.csv") == kSweepCsvColumns);
  CHECK(column_row("simulate", "union_growth.csv") == kUnionGrowthCsvColumns);
  CHECK(column_row("ablate", "ablate.csv") == kAblateCsvColumns);
  CHECK(column_row("ablate", "pareto.csv") == kParetoCsvColumns);
  CHECK(column_row("coverage", "coverage.csv") == kCoverageCsvColumns);
  CHECK(column_row("coactivation", "concentration.csv") == kConcentrationCsvColumns);
  CHECK(column_row("reconstruct", "reconstruction.csv") == kReconstructionCsvColumns);
  CHECK(std::string(kSweepCsvColumns) ==
        "cell,label,mode,tree_size,budget,method,policy,seed,prompts,tokens,steps,mean_tau,"
        "mean_unique,max_unique,speedup,quality");
  CHECK(std::string(kCoverageCsvColumns) == "layer,budget,coverage_mean,coverage_min,coverage_max,groups");
  CHECK(std::string(kReconstructionCsvColumns) ==
        "method,budget,mode,uses_raw_g,trees,mean_error,std_error");
}

TEST_CASE("a static ranking file feeds later runs") {
  auto base = scratch("static");
  write_file(base / "cfg.json", kSmallConfig);
  REQUIRE(run_cli({"calibrate-static", "--config", (base / "cfg.json").string(), "--out-dir",
                   (base / "cal").string()}) == 0);
  auto cfg = nlohmann::json::parse(kSmallConfig);
  cfg["static_ranking_file"] = (base / "cal" / "static_ranking.json").string();
  write_file(base / "cfg2.json", cfg.dump());
  REQUIRE(run_cli({"reconstruct", "--config", (base / "cfg2.json").string(), "--out-dir",
                   (base / "a").string()}) == 0);
  REQUIRE(run_cli({"reconstruct", "--config", (base / "cfg.json").string(), "--out-dir",
                   (base / "b").string()}) == 0);
  // Identical counts, so only the echoed file name differs.
  auto a = lines(slurp(base / "a" / "reconstruction.csv"));
  auto b = lines(slurp(base / "b" / "reconstruction.csv"));
  CHECK(std::vector(a.begin() + 4, a.end()) == std::vector(b.begin() + 4, b.end()));
}
