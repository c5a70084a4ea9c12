// mdprop: train, evaluate and benchmark multi-BN embedding networks.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mdprop/config.hpp"
#include "mdprop/errors.hpp"
#include "mdprop/harness.hpp"

namespace fs = std::filesystem;
using namespace mdprop;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

nlohmann::ordered_json parse_json(const std::string& s) { return nlohmann::ordered_json::parse(s); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string method;
  std::string config;
  std::string out;
  std::string data = "synthetic";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> k;
  std::optional<std::size_t> batch_size;
  std::optional<std::string> loss;
  std::vector<std::string> gens;  // index 0 is --gen2
};

int cmd_train(const TrainArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  ConfigMap cfg;
  if (!a.config.empty()) cfg = load_config_file(a.config);
  if (!a.method.empty()) cfg.set("method", a.method);
  if (a.seed) cfg.set("seed", std::to_string(*a.seed));
  if (a.steps) cfg.set("steps", std::to_string(*a.steps));
  if (a.k) cfg.set("k", std::to_string(*a.k));
  if (a.batch_size) cfg.set("batch_size", std::to_string(*a.batch_size));
  if (a.loss) cfg.set("loss", *a.loss);
  TrainConfig tc = train_config_from(cfg);
  for (std::size_t i = 0; i < a.gens.size(); ++i) {
    if (a.gens[i].empty()) continue;
    if (tc.per_distribution.size() <= i) tc.per_distribution.resize(i + 1);
    tc.per_distribution[i] = parse_generator_spec(a.gens[i]);
  }
  // A seed given on the command line also seeds the synthetic data, unless the config pins it.
  if (a.seed && !cfg.has("data.seed")) cfg.set("data.seed", std::to_string(*a.seed));
  tc.validate();

  DataBundle data = load_data(a.data, cfg);
  const fs::path out(a.out);
  ensure_dir(out);

  TrainLog progress;
  nlohmann::ordered_json manifest;
  manifest["command"] = "train";
  manifest["config"] = parse_json(train_config_json(tc));
  manifest["seed"] = tc.seed;
  manifest["data"] = data.synthetic ? parse_json(synthetic_config_json(*data.synthetic))
                                    : nlohmann::ordered_json(data.train.provenance);
  try {
    TrainResult r = train(data.train, tc, &data.test, &progress);
    const auto bytes = save_checkpoint(r.net);
    write_bytes(out / "checkpoint.mdpk", bytes);
    write_text(out / "trainlog.csv", r.log.to_csv());
    write_text(out / "trainlog_summary.json", r.log.summary_json() + "\n");
    if (r.net.k() >= 2) write_text(out / "bn_divergence.csv", bn_divergence_csv(bn_divergence(r.net)));
    manifest["checkpoint"] = "checkpoint.mdpk";
    manifest["checkpoint_hash"] = git_blob_hash(bytes);
    manifest["metrics"] = parse_json(r.log.summary_json());
    manifest["status"] = "ok";
  } catch (const Error&) {
    write_text(out / "trainlog.csv", progress.to_csv());
    manifest["status"] = "failed";
    manifest["wall_clock_seconds"] = seconds_since(t0);
    write_text(out / "manifest.json", manifest.dump(2) + "\n");
    throw;
  }
  manifest["wall_clock_seconds"] = seconds_since(t0);
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "checkpoint " << (out / "checkpoint.mdpk").string() << " " << manifest["checkpoint_hash"].get<std::string>()
            << "\n";
  return 0;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data = "synthetic";
  std::string split = "test";
  std::string attack = "none";
  double eps = 0.65;
  int steps = 20;
  std::size_t targets = 5;
  std::string ks = "1,4";
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const MultiBNNetwork net = read_checkpoint_file(a.checkpoint);
  ConfigMap cfg;
  DataBundle data = load_data(a.data, cfg);
  if (a.split != "test" && a.split != "train") throw ConfigError("--split must be train or test");
  const Dataset& ds = a.split == "test" ? data.test : data.train;

  EvalOptions eo;
  eo.ks = parse_size_list(a.ks);
  eo.attack = parse_attack_kind(a.attack);
  eo.attack_config.eps = static_cast<Scalar>(a.eps);
  eo.attack_config.steps = a.steps;
  eo.attack_config.targets = eo.attack == AttackKind::kStax ? 1 : a.targets;
  eo.seed = a.seed;
  eo.overlap_classes = data.overlap_classes;
  const EvalReport report = evaluate(net, ds, eo);

  const std::string json = eval_report_json(report);
  const std::string csv = eval_report_csv_header() + "\n" + eval_report_csv_row(report) + "\n";
  if (a.out.empty()) {
    std::cout << json << "\n" << csv;
    return 0;
  }
  const fs::path out(a.out);
  ensure_dir(out);
  write_text(out / "eval.json", json + "\n");
  write_text(out / "eval.csv", csv);
  std::ifstream ck(a.checkpoint, std::ios::binary);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(ck)), std::istreambuf_iterator<char>());
  nlohmann::ordered_json manifest;
  manifest["command"] = "eval";
  manifest["checkpoint"] = a.checkpoint;
  manifest["checkpoint_hash"] = git_blob_hash(bytes);
  manifest["data"] = data.synthetic ? parse_json(synthetic_config_json(*data.synthetic))
                                    : nlohmann::ordered_json(ds.provenance);
  manifest["split"] = a.split;
  manifest["seed"] = a.seed;
  manifest["metrics"] = parse_json(json);
  manifest["wall_clock_seconds"] = seconds_since(t0);
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::cout << csv;
  return 0;
}

// ---- benchmark ------------------------------------------------------------

struct BenchArgs {
  std::string suite = "desk";
  std::string seeds = "0,1,2";
  std::string out;
  std::optional<std::size_t> steps;
  std::optional<double> train_eps;
  std::optional<double> eval_eps;
  std::size_t threads = 0;
  bool save_checkpoints = true;
};

int cmd_benchmark(const BenchArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  if (a.suite != "desk") throw ConfigError("unknown suite '" + a.suite + "' (only 'desk' is defined)");
  BenchmarkOptions bo;
  bo.seeds = parse_seed_list(a.seeds);
  if (a.steps) bo.steps = *a.steps;
  if (a.train_eps) bo.train_eps = static_cast<Scalar>(*a.train_eps);
  if (a.eval_eps) bo.eval_eps = static_cast<Scalar>(*a.eval_eps);
  bo.threads = a.threads;
  const BenchmarkResult r = run_benchmark(bo);

  const fs::path out(a.out);
  ensure_dir(out);
  write_text(out / "results.csv", r.table_csv());
  write_text(out / "results.txt", r.table_text());
  write_text(out / "verdict.json", r.verdict_json() + "\n");

  std::string trainlog = "method,seed,";
  std::string bn = "method,seed,";
  bool trainlog_header = false, bn_header = false;
  for (const auto& c : r.cells) {
    std::istringstream log(c.log.to_csv());
    std::string line;
    std::getline(log, line);
    if (!trainlog_header) {
      trainlog += "step,loss_1,loss_2,loss_3,fooling_2,fooling_3,eval_r1\n";
      trainlog_header = true;
    }
    while (std::getline(log, line)) {
      // pad every method to three loss and two fooling columns
      std::vector<std::string> f;
      std::istringstream ls(line);
      std::string x;
      while (std::getline(ls, x, ',')) f.push_back(x);
      if (line.back() == ',') f.emplace_back();
      const std::size_t d = c.log.distributions;
      std::string row = c.method + "," + std::to_string(c.seed) + "," + f[0];
      for (std::size_t i = 0; i < 3; ++i) row += "," + (i < d ? f[1 + i] : std::string());
      for (std::size_t i = 0; i < 2; ++i) row += "," + (i + 1 < d ? f[1 + d + i] : std::string());
      row += "," + f.back();
      trainlog += row + "\n";
    }
    if (!c.bn_divergence.empty()) {
      std::istringstream bs(bn_divergence_csv(c.bn_divergence));
      std::getline(bs, line);
      if (!bn_header) {
        bn += line + "\n";
        bn_header = true;
      }
      while (std::getline(bs, line)) bn += c.method + "," + std::to_string(c.seed) + "," + line + "\n";
    }
  }
  write_text(out / "trainlog.csv", trainlog);
  write_text(out / "bn_divergence.csv", bn);

  nlohmann::ordered_json manifest;
  manifest["command"] = "benchmark";
  manifest["suite"] = a.suite;
  manifest["seeds"] = bo.seeds;
  manifest["options"] = {{"steps", bo.steps},
                         {"batch_size", bo.batch_size},
                         {"train_eps", bo.train_eps},
                         {"train_attack_steps", bo.train_attack_steps},
                         {"eval_eps", bo.eval_eps},
                         {"eval_attack_steps", bo.eval_attack_steps},
                         {"eval_mtax_targets", bo.eval_mtax_targets}};
  manifest["data"] = parse_json(synthetic_config_json(bo.data));
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  double train_total = 0;
  if (a.save_checkpoints) ensure_dir(out / "checkpoints");
  for (const auto& c : r.cells) {
    std::string tag = c.method;
    for (auto& ch : tag)
      if (ch == '\'') ch = 'p';
    const std::string file = "checkpoints/" + tag + "_s" + std::to_string(c.seed) + ".mdpk";
    if (a.save_checkpoints) write_bytes(out / file, c.checkpoint);
    nlohmann::ordered_json e;
    e["method"] = c.method;
    e["T"] = c.targets_label;
    e["seed"] = c.seed;
    e["config"] = parse_json(train_config_json(desk_methods(bo, c.seed)[static_cast<std::size_t>(
        std::find_if(r.cells.begin(), r.cells.end(), [&](const BenchmarkCell& x) { return x.method == c.method; }) -
        r.cells.begin()) / bo.seeds.size()].config));
    if (a.save_checkpoints) e["checkpoint"] = file;
    e["checkpoint_hash"] = c.checkpoint_hash;
    e["clean"] = parse_json(eval_report_json(c.clean));
    e["stax"] = parse_json(eval_report_json(c.stax));
    e["mtax"] = parse_json(eval_report_json(c.mtax));
    e["overlap_tau"] = c.tau;
    e["train_seconds"] = c.train_seconds;
    train_total += c.train_seconds;
    cells.push_back(e);
  }
  manifest["cells"] = cells;
  manifest["verdict"] = parse_json(r.verdict_json());
  manifest["wall_clock_seconds"] = seconds_since(t0);
  manifest["train_seconds_total"] = train_total;
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::cout << r.table_text() << "\n" << r.verdict_json() << "\n";
  return 0;
}

// ---- bn-report / make-data ------------------------------------------------

int cmd_bn_report(const std::string& checkpoint, const std::string& out) {
  const MultiBNNetwork net = read_checkpoint_file(checkpoint);
  const std::string csv = bn_divergence_csv(bn_divergence(net));
  if (out.empty()) {
    std::cout << csv;
    return 0;
  }
  fs::path path(out);
  if (fs::is_directory(path) || path.extension().empty()) {
    ensure_dir(path);
    path /= "bn_divergence.csv";
  }
  write_text(path, csv);
  return 0;
}

int cmd_make_data(const std::string& spec, const std::string& out) {
  DataBundle data = load_data(spec, {});
  const fs::path dir(out);
  ensure_dir(dir);
  save_csv(data.train, (dir / "train.csv").string());
  save_csv(data.test, (dir / "test.csv").string());
  std::cout << "train " << data.train.size() << " test " << data.test.size()
            << " 1-NN " << one_nn_accuracy(data.train, data.test) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mdprop: multi-distribution BN training for deep metric learning"};
  app.require_subcommand(1);

  TrainArgs ta;
  ta.gens.resize(4);
  auto* train_cmd = app.add_subcommand("train", "train a network and write a checkpoint");
  train_cmd->add_option("--method", ta.method, "st | at | advprop_d | mdprop");
  train_cmd->add_option("--config", ta.config, "key=value or JSON config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", ta.out, "output directory")->required();
  train_cmd->add_option("--data", ta.data, "synthetic[:key=value,...] or CSV path");
  train_cmd->add_option("--seed", ta.seed);
  train_cmd->add_option("--steps", ta.steps);
  train_cmd->add_option("--k", ta.k, "number of BN sets");
  train_cmd->add_option("--batch-size", ta.batch_size);
  train_cmd->add_option("--loss", ta.loss, "multisim | arcface");
  for (std::size_t i = 0; i < ta.gens.size(); ++i) {
    train_cmd->add_option("--gen" + std::to_string(i + 2), ta.gens[i], "generator, e.g. stax:T=1 or mtax:T=5,eps=0.65");
  }

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on clean or adversarial queries");
  eval_cmd->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ea.data, "synthetic[:key=value,...] or CSV path");
  eval_cmd->add_option("--split", ea.split, "train | test");
  eval_cmd->add_option("--attack", ea.attack, "none | stax | mtax");
  eval_cmd->add_option("--eps", ea.eps);
  eval_cmd->add_option("--steps", ea.steps);
  eval_cmd->add_option("--targets", ea.targets, "MTAX targets");
  eval_cmd->add_option("-k", ea.ks, "comma-separated recall ranks");
  eval_cmd->add_option("--seed", ea.seed, "target selection seed");
  eval_cmd->add_option("--out", ea.out, "output directory (prints to stdout if omitted)");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("benchmark", "train and evaluate the five-method matrix");
  bench_cmd->add_option("--suite", ba.suite);
  bench_cmd->add_option("--seeds", ba.seeds, "comma-separated seeds");
  bench_cmd->add_option("--out", ba.out)->required();
  bench_cmd->add_option("--steps", ba.steps);
  bench_cmd->add_option("--train-eps", ba.train_eps);
  bench_cmd->add_option("--eval-eps", ba.eval_eps);
  bench_cmd->add_option("--threads", ba.threads, "worker threads (0: all cores)");
  bench_cmd->add_flag("!--no-checkpoints", ba.save_checkpoints, "skip writing per-cell checkpoints");

  std::string bn_checkpoint, bn_out;
  auto* bn_cmd = app.add_subcommand("bn-report", "per-layer BN parameter divergence between sets");
  bn_cmd->add_option("--checkpoint", bn_checkpoint)->required()->check(CLI::ExistingFile);
  bn_cmd->add_option("--out", bn_out, "CSV file or directory (stdout if omitted)");

  std::string md_spec = "synthetic", md_out;
  auto* md_cmd = app.add_subcommand("make-data", "write a synthetic dataset as CSV");
  md_cmd->add_option("--data", md_spec, "synthetic[:key=value,...]");
  md_cmd->add_option("--out", md_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*eval_cmd) return cmd_eval(ea);
    if (*bench_cmd) return cmd_benchmark(ba);
    if (*bn_cmd) return cmd_bn_report(bn_checkpoint, bn_out);
    if (*md_cmd) return cmd_make_data(md_spec, md_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kRuntime);
  }
  return 0;
}
