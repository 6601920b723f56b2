#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cli/commands.hpp"
#include "cli/config.hpp"
#include "cli/report.hpp"

namespace fs = std::filesystem;
using surelock::cli::run_command;

namespace {

struct Result {
  int code;
  std::string out;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "surelock");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream captured, errors;
  auto* old_out = std::cout.rdbuf(captured.rdbuf());
  auto* old_err = std::cerr.rdbuf(errors.rdbuf());
  const int code = run_command(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  return {code, captured.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(cells);
  }
  return rows;
}

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("surelock_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("unsatisfiable eps writes the baseline token file") {
  TempDir d;
  REQUIRE(invoke({"run", "--mode", "baseline", "--seed", "5", "-o", d / "base"}).code == 0);
  REQUIRE(invoke({"run", "--mode", "surelock", "--eps", "-1", "--seed", "5", "-o", d / "sl"}).code == 0);
  CHECK(slurp(d / "base/tokens.txt") == slurp(d / "sl/tokens.txt"));
  for (const char* f : {"trace.jsonl", "plot.csv", "summary.json", "tokens.txt", "timing.json"})
    CHECK(fs::exists(fs::path(d / "base") / f));
}

TEST_CASE("reruns are byte-identical") {
  TempDir d;
  const std::vector<std::string> args{"run", "--mode", "hybrid", "--k", "0.8", "--seed", "2", "--temperature", "0.8"};
  auto a = args, b = args;
  a.insert(a.end(), {"-o", d / "a"});
  b.insert(b.end(), {"-o", d / "b"});
  REQUIRE(invoke(a).code == 0);
  REQUIRE(invoke(b).code == 0);
  for (const char* f : {"trace.jsonl", "plot.csv", "summary.json", "tokens.txt"})
    CHECK(slurp(fs::path(d / "a") / f) == slurp(fs::path(d / "b") / f));
}

TEST_CASE("plot ratio column") {
  TempDir d;
  REQUIRE(invoke({"run", "--mode", "baseline", "-o", d / "b"}).code == 0);
  REQUIRE(invoke({"run", "--mode", "surelock", "--init-std", "0.3", "-o", d / "s"}).code == 0);
  const auto base = csv_rows(slurp(d / "b/plot.csv"));
  REQUIRE(base.size() == 17);
  CHECK(base[0] == std::vector<std::string>{"t", "ratio", "M_t", "mean_D"});
  for (size_t i = 1; i < base.size(); ++i) CHECK(std::stod(base[i][1]) == 1.0);
  const auto sl = csv_rows(slurp(d / "s/plot.csv"));
  for (size_t i = 2; i < sl.size(); ++i) CHECK(std::stod(sl[i][1]) <= std::stod(sl[i - 1][1]));
  CHECK(sl[1][3].empty());  // no mean_D at t = 1
}

TEST_CASE("eps sweep orders total FLOPs") {
  TempDir d;
  REQUIRE(invoke({"sweep", "--init-std", "0.3", "--eps-list", "5e-4,5e-3,5e-2", "--csv", d / "s.csv"}).code == 0);
  const auto rows = csv_rows(slurp(d / "s.csv"));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0][7] == "F_actual_total");
  for (size_t i = 2; i < rows.size(); ++i) CHECK(std::stoull(rows[i][7]) <= std::stoull(rows[i - 1][7]));
}

TEST_CASE("single-point sweep matches a plain run") {
  TempDir d;
  REQUIRE(invoke({"sweep", "--init-std", "0.3", "--seeds", "4", "--csv", d / "s.csv"}).code == 0);
  REQUIRE(invoke({"run", "--init-std", "0.3", "--seed", "4", "-o", d / "r"}).code == 0);
  const auto rows = csv_rows(slurp(d / "s.csv"));
  REQUIRE(rows.size() == 2);
  const auto summary = nlohmann::json::parse(slurp(d / "r/summary.json"));
  CHECK(rows[1][6] == std::to_string(summary["F_base_total"].get<uint64_t>()));
  CHECK(rows[1][7] == std::to_string(summary["F_actual_total"].get<uint64_t>()));
  CHECK(std::stod(rows[1][9]) == summary["r_bar"].get<double>());
  CHECK(rows[1][10] == std::to_string(summary["locks"].get<size_t>()));
}

TEST_CASE("sweep rows per seed and parallel workers") {
  TempDir d;
  REQUIRE(invoke({"sweep", "--init-std", "0.3", "--seeds", "1,2", "--eps-list", "5e-3,5e-2", "--csv", d / "a.csv"})
              .code == 0);
  REQUIRE(invoke({"sweep", "--init-std", "0.3", "--seeds", "1,2", "--eps-list", "5e-3,5e-2", "--workers", "3",
                  "--csv", d / "b.csv"})
              .code == 0);
  const std::string a = slurp(d / "a.csv");
  CHECK(a == slurp(d / "b.csv"));
  const auto rows = csv_rows(a);
  REQUIRE(rows.size() == 5);
  CHECK(rows[1][0] == "1");
  CHECK(rows[2][0] == "2");
  CHECK(rows[1] != rows[2]);
}

TEST_CASE("configuration errors exit with 2") {
  TempDir d;
  CHECK(invoke({"sweep"}).code == 2);
  CHECK(invoke({"run", "--steps", "40"}).code == 2);
  CHECK(invoke({"run", "--mode", "selection"}).code == 2);  // k missing
  CHECK(invoke({"run", "--mode", "warp"}).code == 2);
  CHECK(invoke({"run", "--config", d / "missing.json"}).code == 2);
  CHECK(invoke({"run", "--weights", d / "missing.json"}).code == 2);
  CHECK(invoke({"frobnicate"}).code == 2);
  std::ofstream(d / "bad.json") << R"({"run": {"stepz": 4}})";
  CHECK(invoke({"run", "--config", d / "bad.json"}).code == 2);
  std::ofstream(d / "broken.json") << "{";
  CHECK(invoke({"run", "--config", d / "broken.json"}).code == 2);
}

TEST_CASE("config file with flag overrides") {
  TempDir d;
  std::ofstream(d / "cfg.json") << R"({"run": {"mode": "selection", "seed": 9, "n_gen": 8, "steps": 4},
                                       "policy": {"k": 0.5}, "init_std": 0.3})";
  REQUIRE(invoke({"run", "--config", d / "cfg.json", "--seed", "10", "-o", d / "o"}).code == 0);
  const auto s = nlohmann::json::parse(slurp(d / "o/summary.json"));
  CHECK(s["seed"] == 10);
  CHECK(s["config"]["run"]["mode"] == "selection");
  CHECK(s["config"]["policy"]["k"] == 0.5);
  CHECK(s["steps"] == 4);

  // The embedded config reproduces the run.
  std::ofstream(d / "again.json") << s["config"].dump();
  REQUIRE(invoke({"run", "--config", d / "again.json", "-o", d / "o2"}).code == 0);
  CHECK(slurp(d / "o/trace.jsonl") == slurp(d / "o2/trace.jsonl"));
  auto round = surelock::cli::to_json(surelock::cli::config_from_json(s["config"]));
  round.erase("out");
  CHECK(round == s["config"]);
}

TEST_CASE("weights file round trip through the CLI") {
  TempDir d;
  surelock::save_weights(surelock::init_weights(surelock::ModelConfig{}, 3, 0.3), d / "w.json");
  REQUIRE(invoke({"run", "--weights", d / "w.json", "-o", d / "a"}).code == 0);
  REQUIRE(invoke({"run", "--weights-seed", "3", "--init-std", "0.3", "-o", d / "b"}).code == 0);
  CHECK(slurp(d / "a/trace.jsonl") == slurp(d / "b/trace.jsonl"));
}

TEST_CASE("simulate battery") {
  const Result r = invoke({"simulate", "--count", "200"});
  CHECK(r.code == 0);
  CHECK(r.out.find("200/200 bound holds") != std::string::npos);
}

TEST_CASE("flops-check reports the worked configuration") {
  const Result r = invoke({"flops-check"});
  CHECK(r.code == 0);
  CHECK(r.out.find("worked: N 4, F_base per step 11264") != std::string::npos);
  CHECK(r.out.find("baseline: counter == formula on 2/2 steps, F_actual 11264 11264") != std::string::npos);
}

TEST_CASE("verify-bound on a stored trace") {
  TempDir d;
  REQUIRE(invoke({"run", "--mode", "baseline", "--init-std", "0.3", "--emit-logits", "-o", d / "r"}).code == 0);
  const Result r = invoke({"verify-bound", "--trace", d / "r/trace.jsonl", "--bound-eps", "1e-2", "--report",
                           d / "bound.json"});
  CHECK(r.code == 0);
  const auto rep = nlohmann::json::parse(slurp(d / "bound.json"));
  CHECK(rep["positions"].size() == 32);
  for (const auto& p : rep["positions"]) CHECK(p["status"] != "violated");
  // Traces without logits are rejected.
  REQUIRE(invoke({"run", "-o", d / "plain"}).code == 0);
  CHECK(invoke({"verify-bound", "--trace", d / "plain/trace.jsonl"}).code == 2);
}

TEST_CASE("constants report") {
  const Result r = invoke({"constants", "--samples", "300", "--radius", "2"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["R_x"] == 2.0);
  CHECK(j["L_blk"].get<double>() >= 1.0);
  CHECK(j["softmax_jacobian_sup"].get<double>() <= 0.5 + 1e-6);
  CHECK(j["layers"].size() == 2);
}

TEST_CASE("shipped config loads and matches the defaults") {
  const auto cfg = surelock::cli::load_config(std::string(SURELOCK_CONFIG_DIR) + "/toy.json");
  auto a = surelock::cli::to_json(cfg), b = surelock::cli::to_json(surelock::cli::ExperimentConfig{});
  a.erase("out");
  b.erase("out");
  CHECK(a == b);
}
