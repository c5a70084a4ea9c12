#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mdprop/attack.hpp"
#include "mdprop/dataio.hpp"
#include "mdprop/embedding_net.hpp"
#include "mdprop/losses.hpp"
#include "mdprop/optim.hpp"

namespace mdprop {

enum class Method { kST, kAT, kAdvPropD, kMDProp };
enum class GeneratorKind { kNone, kStax, kMtax };
enum class LossKind { kMultisim, kArcFace };

std::string to_string(Method m);
std::string to_string(GeneratorKind g);
std::string to_string(LossKind l);
Method parse_method(const std::string& s);
GeneratorKind parse_generator(const std::string& s);
LossKind parse_loss(const std::string& s);

// One generated input distribution (k ≥ 2 for MDProp, or the adversarial
// half of adversarial training).
struct DistributionSpec {
  GeneratorKind generator = GeneratorKind::kStax;
  AttackConfig attack;
  std::optional<LossKind> loss_override;
};

struct TrainConfig {
  Method method = Method::kST;
  std::size_t k_distributions = 1;
  std::vector<DistributionSpec> per_distribution;
  std::size_t batch_size = 32;
  std::size_t steps = 600;
  LossKind loss = LossKind::kMultisim;
  MultisimConfig multisim;
  ArcFaceConfig arcface;
  AdamConfig adam;
  ArchSpec arch;
  Scalar bn_noise_sigma = 0;
  std::optional<std::string> pretrained_checkpoint;
  std::size_t eval_every = 0;  // 0: every max(steps / 20, 10) steps
  std::uint64_t seed = 0;

  // Checks the per-method invariants (ST ⇒ K = 1, AdvProp-D ⇒ K = 2 with a
  // STAX generator, MDProp ⇒ K ≥ 2, AT ⇒ K = 1 with ≥ 1 generator).
  void validate() const;
};

struct Batch {
  Tensor x;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // rows of the source dataset
};

// Class-balanced draw: up to B/2 classes, filled round-robin so every
// included class gets at least two samples where it has them.
Batch sample_batch(const Dataset& dataset, std::size_t batch_size, std::mt19937_64& rng);

// T distinct non-anchor classes per anchor; exemplars are drawn uniformly
// from batch members of the class, falling back to the pool.
TargetSelection select_targets(const Batch& batch, std::size_t targets, const Dataset& pool, std::mt19937_64& rng);

// Mutable state owned by a training run besides the network itself.
struct TrainState {
  Adam optimizer;
  std::optional<ArcFaceHead> arcface;
  std::mt19937_64 rng;
};

TrainState make_train_state(const MultiBNNetwork& net, const TrainConfig& cfg, std::size_t num_classes);

struct StepReport {
  std::vector<double> losses;         // clean first, then one per generated distribution
  std::vector<double> fooling_rates;  // one per generated distribution
};

// Clean batch through BN set 1 plus, for k = 2..K, a generated batch through
// BN set k. One backward over the summed loss, one optimizer update.
StepReport mdprop_step(MultiBNNetwork& net, const Batch& batch, const Dataset& pool, const TrainConfig& cfg,
                       TrainState& state);

// Clean plus generated batches all through the single BN set.
StepReport adversarial_training_step(MultiBNNetwork& net, const Batch& batch, const Dataset& pool,
                                     const TrainConfig& cfg, TrainState& state);

// Plain metric-learning update on the clean batch.
StepReport standard_step(MultiBNNetwork& net, const Batch& batch, const TrainConfig& cfg, TrainState& state);

// Clean batch through BN set 1, single-targeted batch through BN set 2.
StepReport advprop_d_step(MultiBNNetwork& net, const Batch& batch, const Dataset& pool, const TrainConfig& cfg,
                          TrainState& state);

struct TrainLogRow {
  std::size_t step = 0;
  std::vector<double> losses;
  std::vector<double> fooling_rates;
  std::optional<double> eval_recall_at_1;
};

struct TrainLog {
  std::size_t distributions = 1;  // number of loss columns
  std::vector<TrainLogRow> rows;

  std::string to_csv() const;
  std::string summary_json() const;
};

struct TrainResult {
  MultiBNNetwork net;
  TrainLog log;
};

MultiBNNetwork init_network(const TrainConfig& cfg, std::size_t input_dim);

// Runs the configured method for cfg.steps steps. `eval` (optional) is used
// for the periodic clean Recall@1 column of the log. If `progress` is given,
// rows are appended to it as they complete, so a failed run keeps its log.
TrainResult train(const Dataset& train_set, const TrainConfig& cfg, const Dataset* eval = nullptr,
                  TrainLog* progress = nullptr);

}  // namespace mdprop
