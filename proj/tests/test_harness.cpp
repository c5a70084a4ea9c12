#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "mdprop/config.hpp"
#include "mdprop/errors.hpp"
#include "mdprop/harness.hpp"
#include "nlohmann/json.hpp"

using namespace mdprop;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("mdprop_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MDPROP_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) {
  const auto s = slurp(p);
  return {s.begin(), s.end()};
}

}  // namespace

TEST_CASE("git blob hash matches git") {
  CHECK(git_blob_hash({}) == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  const std::string hello = "hello\n";
  CHECK(git_blob_hash({reinterpret_cast<const std::uint8_t*>(hello.data()), hello.size()}) ==
        "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("data specs") {
  auto d = load_data("synthetic:classes=5,per_class=10,dim=4");
  CHECK(d.train.num_classes == 5);
  CHECK(d.train.dim() == 4);
  CHECK(d.overlap_classes == std::vector<int>{0, 1});
  CHECK_THROWS_AS(load_data("/nonexistent/file.csv"), DataError);
  CHECK_THROWS_AS(load_data("synthetic:flavour=1"), ConfigError);
}

TEST_CASE("evaluation: zero-budget attack equals the clean report; stronger attacks recall less") {
  auto data = load_data("synthetic");
  TrainConfig cfg;
  cfg.steps = 150;
  int ordered = 0;
  for (std::uint64_t seed : {0, 1, 2}) {
    cfg.seed = seed;
    auto net = train(data.train, cfg).net;
    EvalOptions clean;
    clean.overlap_classes = data.overlap_classes;
    const auto base = evaluate(net, data.test, clean);

    EvalOptions zero = clean;
    zero.attack = AttackKind::kStax;
    zero.attack_config.eps = 0;
    zero.attack_config.steps = 20;
    const auto z = evaluate(net, data.test, zero);
    CHECK(z.recall_at == base.recall_at);
    CHECK(z.nmi == base.nmi);
    CHECK(z.pi_ratio == base.pi_ratio);
    CHECK(z.overlap_count == base.overlap_count);
    REQUIRE(z.attack);
    // eps 0 can still "fool" where the target already sits closer than the gallery sample
    CHECK(z.attack->fooling_rate <= 1 - base.recall_at.at(1) + 1e-12);

    EvalOptions weak = zero, strong = zero;
    weak.attack_config.eps = 0.01f;
    strong.attack_config.eps = 0.1f;
    ordered += evaluate(net, data.test, strong).recall_at.at(1) <= evaluate(net, data.test, weak).recall_at.at(1);
  }
  CHECK(ordered >= 2);
}

TEST_CASE("evaluation rejects an MTAX budget of more targets than classes") {
  auto data = load_data("synthetic:classes=3");
  TrainConfig cfg;
  cfg.steps = 0;
  auto net = train(data.train, cfg).net;
  EvalOptions o;
  o.attack = AttackKind::kMtax;
  o.attack_config.targets = 5;
  CHECK_THROWS_AS(evaluate(net, data.test, o), TargetSelectionError);
}

TEST_CASE("benchmark with a single seed has zero spread and a well-formed table") {
  BenchmarkOptions o;
  o.seeds = {0};
  o.steps = 20;
  o.eval_attack_steps = 2;
  auto r = run_benchmark(o);
  CHECK(r.cells.size() == 5);
  const auto csv = r.table_csv();
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  CHECK(line.rfind("method,T,clean_R@1,clean_R@4,clean_NMI,clean_pi_ratio,stax_R@1", 0) == 0);
  int rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    CHECK(line.find("[± 0.00]") != std::string::npos);
    CHECK(line.find("[± 0.000]") != std::string::npos);
  }
  CHECK(rows == 5);
  CHECK(csv.find("MP'',\"1,5\",") != std::string::npos);
  auto verdict = nlohmann::json::parse(r.verdict_json());
  CHECK(verdict.contains("claims"));
  CHECK(r.table_text().find("MP''") != std::string::npos);
}

TEST_CASE("cli: exit codes") {
  TempDir tmp;
  const auto log = tmp.path / "log.txt";
  CHECK(run("--help", log) == 0);
  CHECK(run("train --method sgd --out " + (tmp.path / "a").string(), log) == 2);
  CHECK(run("train --method st --k 3 --out " + (tmp.path / "a").string(), log) == 2);
  CHECK(run("train --method st --data /nonexistent.csv --out " + (tmp.path / "a").string(), log) == 4);
  CHECK(run("frobnicate", log) == 2);
  CHECK(run("train --method st --steps 0 --out " + (tmp.path / "st").string(), log) == 0);
  CHECK(run("bn-report --checkpoint " + (tmp.path / "st" / "checkpoint.mdpk").string(), log) == 2);
  CHECK(run("eval --checkpoint " + (tmp.path / "st" / "checkpoint.mdpk").string() +
                " --data synthetic:classes=3 --attack mtax --targets 5",
            log) == 4);
}

TEST_CASE("cli: zero-step training writes the initial network") {
  TempDir tmp;
  const auto log = tmp.path / "log.txt";
  REQUIRE(run("train --method st --steps 0 --seed 5 --out " + (tmp.path / "st").string(), log) == 0);
  auto net = read_checkpoint_file((tmp.path / "st" / "checkpoint.mdpk").string());
  TrainConfig cfg;
  cfg.seed = 5;
  CHECK(net.flat_state() == init_network(cfg, 32).flat_state());
  auto manifest = nlohmann::json::parse(slurp(tmp.path / "st" / "manifest.json"));
  CHECK(manifest["status"] == "ok");
  CHECK(manifest["checkpoint_hash"] == git_blob_hash(bytes_of(tmp.path / "st" / "checkpoint.mdpk")));
}

TEST_CASE("cli: repeated runs are byte identical; eval leaves the checkpoint alone") {
  TempDir tmp;
  const auto log = tmp.path / "log.txt";
  const std::string train_args = "train --method mdprop --k 3 --gen2 stax:T=1 --gen3 mtax:T=5 --steps 30 --seed 2 --out ";
  REQUIRE(run(train_args + (tmp.path / "a").string(), log) == 0);
  REQUIRE(run(train_args + (tmp.path / "b").string(), log) == 0);
  for (const char* f : {"checkpoint.mdpk", "trainlog.csv", "bn_divergence.csv", "trainlog_summary.json"}) {
    INFO(f);
    CHECK(slurp(tmp.path / "a" / f) == slurp(tmp.path / "b" / f));
  }

  const auto ckpt = (tmp.path / "a" / "checkpoint.mdpk").string();
  const auto before = slurp(ckpt);
  const std::string eval_args = "eval --checkpoint " + ckpt + " --attack mtax --steps 5 --seed 2 --out ";
  REQUIRE(run(eval_args + (tmp.path / "e1").string(), log) == 0);
  REQUIRE(run(eval_args + (tmp.path / "e2").string(), log) == 0);
  CHECK(slurp(tmp.path / "e1" / "eval.csv") == slurp(tmp.path / "e2" / "eval.csv"));
  CHECK(slurp(tmp.path / "e1" / "eval.json") == slurp(tmp.path / "e2" / "eval.json"));
  CHECK(slurp(ckpt) == before);

  // bn-report: 2 BN positions × 3 set pairs.
  REQUIRE(run("bn-report --checkpoint " + ckpt + " --out " + (tmp.path / "bn.csv").string(), log) == 0);
  const auto report = slurp(tmp.path / "bn.csv");
  CHECK(std::count(report.begin(), report.end(), '\n') == 1 + 2 * 3);
}

TEST_CASE("cli: eval with a zero budget matches the clean report") {
  TempDir tmp;
  const auto log = tmp.path / "log.txt";
  REQUIRE(run("train --method st --steps 40 --out " + (tmp.path / "st").string(), log) == 0);
  const auto ckpt = (tmp.path / "st" / "checkpoint.mdpk").string();
  REQUIRE(run("eval --checkpoint " + ckpt + " --out " + (tmp.path / "none").string(), log) == 0);
  REQUIRE(run("eval --checkpoint " + ckpt + " --attack stax --eps 0 --out " + (tmp.path / "zero").string(), log) == 0);
  CHECK(slurp(tmp.path / "none" / "eval.csv") == slurp(tmp.path / "zero" / "eval.csv"));
}

TEST_CASE("cli: zero-noise untrained K=3 checkpoint gives an all-zero divergence table") {
  TempDir tmp;
  const auto log = tmp.path / "log.txt";
  REQUIRE(run("train --method mdprop --k 3 --gen2 stax:T=1 --gen3 mtax:T=2 --steps 0 --out " + (tmp.path / "m").string(),
              log) == 0);
  REQUIRE(run("bn-report --checkpoint " + (tmp.path / "m" / "checkpoint.mdpk").string() + " --out " +
                  (tmp.path / "bn.csv").string(),
              log) == 0);
  std::istringstream is(slurp(tmp.path / "bn.csv"));
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::istringstream cells(line);
    std::string cell;
    for (int i = 0; std::getline(cells, cell, ','); ++i) {
      if (i >= 3) CHECK(std::stod(cell) == 0.0);
    }
  }
}
