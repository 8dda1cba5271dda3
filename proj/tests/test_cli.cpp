#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "bilevel_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(BILEVEL_CLI) + " " + args + " >" + (workdir() / "stdout.txt").string() +
                          " 2>" + (workdir() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::string path(const std::string& name) { return (workdir() / name).string(); }

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(run("--help") == 0);
  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("gen-data cc") == 1);  // --out is required
  CHECK(run("gen-data nope --out " + path("x.csv")) == 1);
}

TEST_CASE("gen-data is deterministic and writes a manifest") {
  REQUIRE(run("gen-data cc --n 300 --seed 3 --out " + path("a.csv")) == 0);
  REQUIRE(run("gen-data cc --n 300 --seed 3 --out " + path("b.csv")) == 0);
  CHECK(slurp(path("a.csv")) == slurp(path("b.csv")));
  REQUIRE(run("gen-data cc --n 300 --seed 4 --out " + path("c.csv")) == 0);
  CHECK(slurp(path("a.csv")) != slurp(path("c.csv")));

  const auto m = read_json(path("a.manifest.json"));
  CHECK(m.at("command").get<std::string>() == "gen-data");
  CHECK(m.at("seed").get<std::uint64_t>() == 3);
  REQUIRE(m.at("outputs").size() >= 1);
  CHECK(m.at("outputs")[0].get<std::string>() == path("a.csv"));

  // Seed from the environment when no flag is given.
  REQUIRE(run("gen-data cc --n 300 --out " + path("env.csv")) == 0);
  REQUIRE(std::system(("BILEVEL_SEED=3 " + std::string(BILEVEL_CLI) + " gen-data cc --n 300 --out " +
                       path("env3.csv") + " >/dev/null").c_str()) == 0);
  CHECK(slurp(path("env3.csv")) == slurp(path("a.csv")));

  CHECK(run("gen-data plant-coal-synth --n 20 --out " + path("small.csv")) == 1);
}

TEST_CASE("config file values yield to flags") {
  std::ofstream(path("cfg.json")) << R"({"seed": 3, "gen-data": {"n": 300}})";
  REQUIRE(run("gen-data cc --config " + path("cfg.json") + " --out " + path("cfg.csv")) == 0);
  CHECK(slurp(path("cfg.csv")) == slurp(path("a.csv")));
  REQUIRE(run("gen-data cc --config " + path("cfg.json") + " --seed 4 --out " + path("cfg4.csv")) == 0);
  CHECK(slurp(path("cfg4.csv")) == slurp(path("c.csv")));
  std::ofstream(path("broken.json")) << "{";
  CHECK(run("gen-data cc --config " + path("broken.json") + " --out " + path("z.csv")) == 1);
}

TEST_CASE("solve writes report, trace and listing") {
  REQUIRE(run("solve cc --starts 10 --seed 1 --out " + path("solve_cc")) == 0);
  const auto r = read_json(path("solve_cc/report.json"));
  CHECK(std::abs(r.at("objective").get<double>() - 5.0) <= 1e-3);
  CHECK(r.at("status").get<std::string>() == "Optimal");
  CHECK(fs::exists(path("solve_cc/trace.csv")));
  CHECK(fs::exists(path("solve_cc/nlp.txt")));
  CHECK(fs::exists(path("solve_cc/manifest.json")));

  REQUIRE(run("solve cc --starts 10 --seed 1 --out " + path("solve_cc2")) == 0);
  const auto r2 = read_json(path("solve_cc2/report.json"));
  CHECK(r2.at("objective") == r.at("objective"));
  CHECK(r2.at("point") == r.at("point"));

  CHECK(run("solve cc --mode ann-kkt --out " + path("ann")) == 1);
  CHECK(run("solve cc --mode other --out " + path("other")) == 1);
  CHECK(run("report " + path("solve_cc/report.json") + " " + path("solve_cc/manifest.json")) == 0);
}

TEST_CASE("infeasible problem file exits with the infeasible code") {
  const nlohmann::json j = {
      {"variables",
       {{{"name", "x"}, {"role", "upper"}, {"lo", 0}, {"hi", 1}}, {{"name", "y"}, {"lo", 0}, {"hi", 1}}}},
      {"upper", {{"objective", "(+ x y)"}, {"inequalities", {"(+ x 1)"}}}},
      {"lower", {{"objective", "y"}}}};
  std::ofstream(path("infeasible.json")) << j.dump();
  CHECK(run("solve " + path("infeasible.json") + " --starts 3 --out " + path("inf")) == 3);
  CHECK(read_json(path("inf/report.json")).at("status").get<std::string>() == "Infeasible");

  std::ofstream(path("bad.json")) << R"({"variables": []})";
  CHECK(run("solve " + path("bad.json") + " --out " + path("bad")) == 1);
}

TEST_CASE("train rejects a missing target column") {
  CHECK(run("train --data " + path("a.csv") + " --target nope --out " + path("m.json")) == 1);
  REQUIRE(run("train --data " + path("a.csv") + " --target f --inputs x,y --trials 2 --max-epochs 50 --patience 10 --seed 2 --out " +
              path("m.json")) == 0);
  const auto m = read_json(path("m.json"));
  CHECK(m.at("target").get<std::string>() == "f");
  const auto man = read_json(path("m.manifest.json"));
  REQUIRE(man.at("inputs").size() == 1);
  CHECK(man.at("inputs")[0].at("sha256").get<std::string>().size() == 64);
  CHECK(fs::exists(path("m.metrics.csv")));
  CHECK(fs::exists(path("m.trials.csv")));
  CHECK(fs::exists(path("m.manifest.json")));
}
