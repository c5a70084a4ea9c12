#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mdprop/config.hpp"
#include "mdprop/dataio.hpp"
#include "mdprop/embedding_net.hpp"
#include "mdprop/metrics.hpp"
#include "mdprop/trainer.hpp"

namespace mdprop {

// Git blob id of a byte string: SHA-1 over "blob <len>\0" + bytes.
std::string git_blob_hash(std::span<const std::uint8_t> bytes);

struct DataBundle {
  Dataset train;
  Dataset test;
  std::optional<SyntheticConfig> synthetic;
  std::vector<int> overlap_classes;  // engineered overlap pair, if any
};

// "synthetic" or "synthetic:key=value,..." (keys as in the [data] config
// section), or a CSV path whose last column is the label. A CSV is used as
// both splits.
DataBundle load_data(const std::string& spec, const ConfigMap& config = {});

enum class AttackKind { kNone, kStax, kMtax };
AttackKind parse_attack_kind(const std::string& s);
std::string to_string(AttackKind k);

struct EvalOptions {
  std::vector<std::size_t> ks = {1, 4};
  AttackKind attack = AttackKind::kNone;
  AttackConfig attack_config;  // targets ignored for stax (always 1)
  std::uint64_t seed = 0;      // target selection
  std::vector<int> overlap_classes;
};

// Evaluates through the inference view (BN set 1). With an attack, every
// sample becomes an adversarial query ranked against the clean gallery with
// its own clean twin excluded; NMI and π are computed on the adversarial
// embeddings. The network is not modified.
EvalReport evaluate(const MultiBNNetwork& net, const Dataset& data, const EvalOptions& options);

// ---- benchmark ----------------------------------------------------------

struct MethodSpec {
  std::string name;  // ST, AT, AP', MP', MP''
  std::string targets_label;
  TrainConfig config;
};

struct BenchmarkOptions {
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::size_t steps = 600;
  std::size_t batch_size = 32;
  Scalar train_eps = static_cast<Scalar>(kDefaultGeneratorEps);
  int train_attack_steps = 1;
  Scalar eval_eps = static_cast<Scalar>(0.65);
  int eval_attack_steps = 20;
  std::size_t eval_mtax_targets = 5;
  std::size_t threads = 0;  // 0: hardware concurrency
  SyntheticConfig data;     // seed is replaced per benchmark seed
};

// ST, AT, AP', MP' (clean + MTAX T=3), MP'' (clean + STAX + MTAX T=5).
std::vector<MethodSpec> desk_methods(const BenchmarkOptions& options, std::uint64_t seed);

struct BenchmarkCell {
  std::string method;
  std::string targets_label;
  std::uint64_t seed = 0;
  EvalReport clean;
  EvalReport stax;
  EvalReport mtax;
  std::size_t overlap_count = 0;
  double tau = 0;
  std::vector<BNDivergenceRow> bn_divergence;  // empty when K = 1
  std::vector<std::uint8_t> checkpoint;
  std::string checkpoint_hash;
  TrainLog log;
  double train_seconds = 0;
};

struct BenchmarkResult {
  BenchmarkOptions options;
  std::vector<BenchmarkCell> cells;  // method-major, then seed

  std::string table_csv() const;
  std::string table_text() const;
  std::string verdict_json() const;
};

BenchmarkResult run_benchmark(const BenchmarkOptions& options);

// Directional claims checked on a finished benchmark.
struct Verdict {
  struct Claim {
    std::string id;
    std::string description;
    std::size_t seeds_holding = 0;
    std::size_t seeds_total = 0;
    std::optional<bool> mean_holds;  // for claims also judged on the seed mean
    bool pass = false;
  };
  std::vector<Claim> claims;
};

Verdict benchmark_verdict(const BenchmarkResult& result);

}  // namespace mdprop
