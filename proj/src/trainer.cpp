#include "mdprop/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mdprop/errors.hpp"
#include "mdprop/metrics.hpp"

namespace mdprop {

std::string to_string(Method m) {
  switch (m) {
    case Method::kST: return "st";
    case Method::kAT: return "at";
    case Method::kAdvPropD: return "advprop_d";
    case Method::kMDProp: return "mdprop";
  }
  return "?";
}

std::string to_string(GeneratorKind g) {
  switch (g) {
    case GeneratorKind::kNone: return "none";
    case GeneratorKind::kStax: return "stax";
    case GeneratorKind::kMtax: return "mtax";
  }
  return "?";
}

std::string to_string(LossKind l) { return l == LossKind::kMultisim ? "multisim" : "arcface"; }

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

Method parse_method(const std::string& s) {
  const auto v = lower(s);
  if (v == "st") return Method::kST;
  if (v == "at") return Method::kAT;
  if (v == "advprop_d" || v == "advprop-d" || v == "ap") return Method::kAdvPropD;
  if (v == "mdprop" || v == "mp") return Method::kMDProp;
  throw ConfigError("unknown method '" + s + "' (expected st, at, advprop_d or mdprop)");
}

GeneratorKind parse_generator(const std::string& s) {
  const auto v = lower(s);
  if (v == "none") return GeneratorKind::kNone;
  if (v == "stax") return GeneratorKind::kStax;
  if (v == "mtax") return GeneratorKind::kMtax;
  throw ConfigError("unknown generator '" + s + "' (expected none, stax or mtax)");
}

LossKind parse_loss(const std::string& s) {
  const auto v = lower(s);
  if (v == "multisim" || v == "ms") return LossKind::kMultisim;
  if (v == "arcface") return LossKind::kArcFace;
  throw ConfigError("unknown loss '" + s + "' (expected multisim or arcface)");
}

void TrainConfig::validate() const {
  if (k_distributions < 1) throw ConfigError("train: K must be at least 1");
  if (batch_size < 2) throw ConfigError("train: batch size must be at least 2");
  switch (method) {
    case Method::kST:
      if (k_distributions != 1) throw ConfigError("train: ST uses a single BN set, got K=" + std::to_string(k_distributions));
      break;
    case Method::kAT:
      if (k_distributions != 1) throw ConfigError("train: AT uses a single BN set, got K=" + std::to_string(k_distributions));
      if (per_distribution.empty()) throw ConfigError("train: AT needs at least one generator");
      break;
    case Method::kAdvPropD:
      if (k_distributions != 2) throw ConfigError("train: AdvProp-D needs K=2, got K=" + std::to_string(k_distributions));
      if (per_distribution.size() != 1 || per_distribution[0].generator != GeneratorKind::kStax ||
          per_distribution[0].attack.targets != 1) {
        throw ConfigError("train: AdvProp-D needs exactly one single-targeted generator");
      }
      break;
    case Method::kMDProp:
      if (k_distributions < 2) throw ConfigError("train: MDProp needs K >= 2, got K=" + std::to_string(k_distributions));
      if (per_distribution.size() != k_distributions - 1) {
        throw ConfigError("train: MDProp with K=" + std::to_string(k_distributions) + " needs " +
                          std::to_string(k_distributions - 1) + " generated distributions, got " +
                          std::to_string(per_distribution.size()));
      }
      break;
  }
  for (const auto& d : per_distribution) {
    d.attack.validate();
    if (d.generator == GeneratorKind::kStax && d.attack.targets != 1) {
      throw ConfigError("train: stax generator needs T=1, got T=" + std::to_string(d.attack.targets));
    }
  }
  multisim.validate();
  arcface.validate();
  adam.validate();
  arch.validate();
}

Batch sample_batch(const Dataset& dataset, std::size_t batch_size, std::mt19937_64& rng) {
  const std::size_t m = dataset.size();
  if (batch_size > m) {
    throw DataError("sample_batch: batch of " + std::to_string(batch_size) + " from " + std::to_string(m) + " samples");
  }
  if (batch_size == 0) throw ConfigError("sample_batch: batch size must be positive");

  std::vector<std::size_t> picked;
  if (batch_size == m) {
    picked.resize(m);
    std::iota(picked.begin(), picked.end(), 0);
  } else {
    auto by_class = dataset.class_index();
    std::vector<std::size_t> classes;
    for (std::size_t c = 0; c < by_class.size(); ++c)
      if (!by_class[c].empty()) classes.push_back(c);
    if (classes.size() < 2) throw DataError("sample_batch: dataset has fewer than 2 classes");
    std::shuffle(classes.begin(), classes.end(), rng);
    for (auto c : classes) std::shuffle(by_class[c].begin(), by_class[c].end(), rng);

    std::size_t active = std::min(classes.size(), std::max<std::size_t>(1, batch_size / 2));
    std::vector<std::size_t> cursor(by_class.size(), 0);
    while (picked.size() < batch_size) {
      bool progressed = false;
      for (std::size_t i = 0; i < active && picked.size() < batch_size; ++i) {
        const auto c = classes[i];
        if (cursor[c] < by_class[c].size()) {
          picked.push_back(by_class[c][cursor[c]++]);
          progressed = true;
        }
      }
      if (!progressed) ++active;  // chosen classes ran dry; widen the pool
    }
  }
  std::shuffle(picked.begin(), picked.end(), rng);

  Batch b;
  b.x = dataset.rows(picked);
  for (auto i : picked) b.labels.push_back(dataset.labels[i]);
  b.indices = std::move(picked);
  return b;
}

TargetSelection select_targets(const Batch& batch, std::size_t targets, const Dataset& pool, std::mt19937_64& rng) {
  if (targets == 0) throw ConfigError("select_targets: T must be positive");
  const std::size_t c = pool.num_classes;
  if (c <= targets) {
    throw TargetSelectionError("ineffective adversarial target selection: " + std::to_string(c) +
                               " classes cannot supply " + std::to_string(targets) + " foreign targets");
  }
  const auto pool_index = pool.class_index();
  std::vector<std::vector<std::size_t>> in_batch(c);
  for (std::size_t i = 0; i < batch.labels.size(); ++i) in_batch[static_cast<std::size_t>(batch.labels[i])].push_back(i);

  const std::size_t n = batch.x.cols();
  TargetSelection sel;
  sel.targets_per_anchor = targets;
  std::vector<Scalar> ex;
  ex.reserve(batch.labels.size() * targets * n);
  auto X = batch.x.data();
  auto P = pool.features.data();

  std::vector<int> candidates;
  for (std::size_t a = 0; a < batch.labels.size(); ++a) {
    candidates.clear();
    for (std::size_t k = 0; k < c; ++k) {
      if (static_cast<int>(k) == batch.labels[a]) continue;
      if (in_batch[k].empty() && pool_index[k].empty()) continue;
      candidates.push_back(static_cast<int>(k));
    }
    if (candidates.size() < targets) {
      throw TargetSelectionError("ineffective adversarial target selection: anchor " + std::to_string(a) + " has " +
                                 std::to_string(candidates.size()) + " populated foreign classes, T=" +
                                 std::to_string(targets));
    }
    for (std::size_t j = 0; j < targets; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, candidates.size() - 1);
      std::swap(candidates[j], candidates[pick(rng)]);
      const auto y = static_cast<std::size_t>(candidates[j]);
      sel.labels.push_back(candidates[j]);
      if (!in_batch[y].empty()) {
        std::uniform_int_distribution<std::size_t> u(0, in_batch[y].size() - 1);
        const auto row = in_batch[y][u(rng)];
        sel.indices.push_back(batch.indices.empty() ? row : batch.indices[row]);
        ex.insert(ex.end(), X.begin() + row * n, X.begin() + (row + 1) * n);
      } else {
        std::uniform_int_distribution<std::size_t> u(0, pool_index[y].size() - 1);
        const auto row = pool_index[y][u(rng)];
        sel.indices.push_back(row);
        ex.insert(ex.end(), P.begin() + row * n, P.begin() + (row + 1) * n);
      }
    }
  }
  sel.exemplars = Tensor::from({batch.labels.size() * targets, n}, std::move(ex));
  return sel;
}

TrainState make_train_state(const MultiBNNetwork& net, const TrainConfig& cfg, std::size_t num_classes) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x5eedu};
  TrainState s{Adam(net.parameters(), cfg.adam), std::nullopt, std::mt19937_64(seq)};
  bool arcface = cfg.loss == LossKind::kArcFace;
  for (const auto& d : cfg.per_distribution) arcface = arcface || d.loss_override == LossKind::kArcFace;
  if (arcface) s.arcface.emplace(num_classes, net.embedding_dim(), cfg.seed ^ 0xa5cfULL, cfg.arcface);
  return s;
}

namespace {

Tensor metric_loss(const Tensor& emb, std::span<const int> labels, LossKind kind, const TrainConfig& cfg,
                   TrainState& state) {
  if (kind == LossKind::kArcFace) {
    if (!state.arcface) throw ConfigError("train: ArcFace loss requested without class centers");
    return state.arcface->loss(emb, labels);
  }
  return multisimilarity_loss(emb, labels, cfg.multisim);
}

void zero_all(TrainState& state) {
  state.optimizer.zero_grad();
  if (state.arcface) state.arcface->zero_grad();
}

void step_all(TrainState& state) {
  state.optimizer.step();
  if (state.arcface) state.arcface->step();
}

void check_finite(const std::vector<double>& losses) {
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (!std::isfinite(losses[i])) {
      std::ostringstream os;
      os << "non-finite loss in distribution " << i + 1 << " (losses:";
      for (double l : losses) os << ' ' << l;
      os << "); step aborted";
      throw NumericError(os.str());
    }
  }
}

// Distance from each anchor's clean embedding to its nearest same-class
// batch member; -1 when the anchor has no such member.
std::vector<Scalar> batch_gallery_distances(MultiBNNetwork& net, std::size_t bn_index, const Batch& batch) {
  Tensor emb;
  {
    NoGradGuard no_grad;
    emb = net.forward(batch.x, bn_index, Mode::kEval);
  }
  const std::size_t b = batch.labels.size();
  const std::size_t d = emb.cols();
  std::vector<Scalar> out(b, Scalar{-1});
  for (std::size_t i = 0; i < b; ++i) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    for (std::size_t j = 0; j < b; ++j) {
      if (i == j || batch.labels[i] != batch.labels[j]) continue;
      best = std::min(best, euclidean(emb.data().subspan(i * d, d), emb.data().subspan(j * d, d)));
    }
    if (std::isfinite(best)) out[i] = best;
  }
  return out;
}

struct Generated {
  Tensor x;
  double fooling_rate = 0;
};

Generated generate(MultiBNNetwork& net, std::size_t bn_index, const Batch& batch, const Dataset& pool,
                   const DistributionSpec& spec, TrainState& state) {
  if (spec.generator == GeneratorKind::kNone) return {batch.x, 0.0};
  AttackConfig attack = spec.attack;
  if (attack.random_start) attack.seed = state.rng();
  const auto targets = select_targets(batch, attack.targets, pool, state.rng);
  const auto gallery = batch_gallery_distances(net, bn_index, batch);
  const auto adv = spec.generator == GeneratorKind::kStax
                       ? gen_stax(net, bn_index, batch.x, batch.labels, targets, attack, gallery)
                       : gen_mtax(net, bn_index, batch.x, batch.labels, targets, attack, gallery);
  const auto with_gallery = static_cast<std::size_t>(std::count_if(gallery.begin(), gallery.end(), [](Scalar g) { return g >= 0; }));
  return {adv.x_adv, with_gallery ? double(adv.fooled_count) / double(with_gallery) : 0.0};
}

}  // namespace

StepReport mdprop_step(MultiBNNetwork& net, const Batch& batch, const Dataset& pool, const TrainConfig& cfg,
                       TrainState& state) {
  const std::size_t k = net.k();
  if (k != cfg.k_distributions) {
    throw ConfigError("mdprop_step: network has K=" + std::to_string(k) + ", config asks for K=" +
                      std::to_string(cfg.k_distributions));
  }
  if (cfg.per_distribution.size() + 1 < k) throw ConfigError("mdprop_step: missing generator for some BN set");
  zero_all(state);

  StepReport report;
  std::vector<Tensor> generated;
  for (std::size_t j = 2; j <= k; ++j) {
    auto g = generate(net, j, batch, pool, cfg.per_distribution[j - 2], state);
    generated.push_back(g.x);
    report.fooling_rates.push_back(g.fooling_rate);
  }

  GraphScope scope;
  Tensor total = metric_loss(net.forward(batch.x, 1, Mode::kTrain), batch.labels, cfg.loss, cfg, state);
  report.losses.push_back(total.item());
  for (std::size_t j = 2; j <= k; ++j) {
    const auto& spec = cfg.per_distribution[j - 2];
    Tensor lj = metric_loss(net.forward(generated[j - 2], j, Mode::kTrain), batch.labels,
                            spec.loss_override.value_or(cfg.loss), cfg, state);
    report.losses.push_back(lj.item());
    total = add(total, lj);
  }
  check_finite(report.losses);
  backward(total);
  step_all(state);
  return report;
}

StepReport adversarial_training_step(MultiBNNetwork& net, const Batch& batch, const Dataset& pool,
                                     const TrainConfig& cfg, TrainState& state) {
  if (net.k() != 1) throw ConfigError("adversarial_training_step: network must have K=1, got K=" + std::to_string(net.k()));
  zero_all(state);

  StepReport report;
  std::vector<Tensor> generated;
  for (const auto& spec : cfg.per_distribution) {
    auto g = generate(net, 1, batch, pool, spec, state);
    generated.push_back(g.x);
    report.fooling_rates.push_back(g.fooling_rate);
  }

  GraphScope scope;
  Tensor total = metric_loss(net.forward(batch.x, 1, Mode::kTrain), batch.labels, cfg.loss, cfg, state);
  report.losses.push_back(total.item());
  for (std::size_t j = 0; j < generated.size(); ++j) {
    Tensor lj = metric_loss(net.forward(generated[j], 1, Mode::kTrain), batch.labels,
                            cfg.per_distribution[j].loss_override.value_or(cfg.loss), cfg, state);
    report.losses.push_back(lj.item());
    total = add(total, lj);
  }
  check_finite(report.losses);
  backward(total);
  step_all(state);
  return report;
}

StepReport standard_step(MultiBNNetwork& net, const Batch& batch, const TrainConfig& cfg, TrainState& state) {
  zero_all(state);
  GraphScope scope;
  Tensor loss = metric_loss(net.forward(batch.x, 1, Mode::kTrain), batch.labels, cfg.loss, cfg, state);
  StepReport report;
  report.losses.push_back(loss.item());
  check_finite(report.losses);
  backward(loss);
  step_all(state);
  return report;
}

StepReport advprop_d_step(MultiBNNetwork& net, const Batch& batch, const Dataset& pool, const TrainConfig& cfg,
                          TrainState& state) {
  if (net.k() != 2) throw ConfigError("advprop_d_step: network must have K=2, got K=" + std::to_string(net.k()));
  if (cfg.per_distribution.empty()) throw ConfigError("advprop_d_step: missing the single-targeted generator");
  const auto& spec = cfg.per_distribution.front();
  zero_all(state);

  AttackConfig attack = spec.attack;
  if (attack.random_start) attack.seed = state.rng();
  const auto targets = select_targets(batch, 1, pool, state.rng);
  const auto gallery = batch_gallery_distances(net, 2, batch);
  const auto adv = gen_stax(net, 2, batch.x, batch.labels, targets, attack, gallery);
  const auto with_gallery = static_cast<std::size_t>(std::count_if(gallery.begin(), gallery.end(), [](Scalar g) { return g >= 0; }));

  GraphScope scope;
  Tensor clean = metric_loss(net.forward(batch.x, 1, Mode::kTrain), batch.labels, cfg.loss, cfg, state);
  Tensor aux = metric_loss(net.forward(adv.x_adv, 2, Mode::kTrain), batch.labels,
                           spec.loss_override.value_or(cfg.loss), cfg, state);
  StepReport report;
  report.losses = {clean.item(), aux.item()};
  report.fooling_rates = {with_gallery ? double(adv.fooled_count) / double(with_gallery) : 0.0};
  check_finite(report.losses);
  backward(add(clean, aux));
  step_all(state);
  return report;
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "step";
  for (std::size_t i = 1; i <= distributions; ++i) os << ",loss_" << i;
  for (std::size_t i = 2; i <= distributions; ++i) os << ",fooling_" << i;
  os << ",eval_r1\n";
  os.precision(9);
  for (const auto& r : rows) {
    os << r.step;
    for (std::size_t i = 0; i < distributions; ++i) os << ',' << (i < r.losses.size() ? r.losses[i] : 0.0);
    for (std::size_t i = 0; i + 1 < distributions; ++i)
      os << ',' << (i < r.fooling_rates.size() ? r.fooling_rates[i] : 0.0);
    os << ',';
    if (r.eval_recall_at_1) os << *r.eval_recall_at_1;
    os << '\n';
  }
  return os.str();
}

std::string TrainLog::summary_json() const {
  nlohmann::json j;
  j["steps"] = rows.size();
  j["distributions"] = distributions;
  if (!rows.empty()) {
    j["first_losses"] = rows.front().losses;
    j["final_losses"] = rows.back().losses;
    j["final_fooling_rates"] = rows.back().fooling_rates;
  }
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& r : rows)
    if (r.eval_recall_at_1) evals.push_back({{"step", r.step}, {"recall_at_1", *r.eval_recall_at_1}});
  j["eval"] = evals;
  return j.dump(2);
}

MultiBNNetwork init_network(const TrainConfig& cfg, std::size_t input_dim) {
  ArchSpec arch = cfg.arch;
  arch.input_dim = input_dim;
  InitConfig init;
  init.seed = cfg.seed;
  init.pretrained_checkpoint = cfg.pretrained_checkpoint;
  init.bn_noise_sigma = cfg.bn_noise_sigma;
  return MultiBNNetwork::init(arch, cfg.k_distributions, init);
}

namespace {

double eval_recall_at_1(MultiBNNetwork& net, const Dataset& eval) {
  NoGradGuard no_grad;
  EmbeddingSet set{net.forward(eval.features, 1, Mode::kEval), eval.labels};
  return recall_at_k(set, 1);
}

}  // namespace

TrainResult train(const Dataset& train_set, const TrainConfig& cfg, const Dataset* eval, TrainLog* progress) {
  cfg.validate();
  train_set.validate();
  TrainResult result{init_network(cfg, train_set.dim()), {}};
  MultiBNNetwork& net = result.net;
  TrainState state = make_train_state(net, cfg, train_set.num_classes);
  result.log.distributions = cfg.method == Method::kST ? 1 : 1 + cfg.per_distribution.size();
  if (progress) *progress = TrainLog{result.log.distributions, {}};
  const std::size_t every = cfg.eval_every ? cfg.eval_every : std::max<std::size_t>(cfg.steps / 20, 10);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const Batch batch = sample_batch(train_set, cfg.batch_size, state.rng);
    StepReport rep;
    switch (cfg.method) {
      case Method::kST: rep = standard_step(net, batch, cfg, state); break;
      case Method::kAT: rep = adversarial_training_step(net, batch, train_set, cfg, state); break;
      case Method::kAdvPropD: rep = advprop_d_step(net, batch, train_set, cfg, state); break;
      case Method::kMDProp: rep = mdprop_step(net, batch, train_set, cfg, state); break;
    }
    TrainLogRow row{step, std::move(rep.losses), std::move(rep.fooling_rates), std::nullopt};
    if (eval && (step % every == 0 || step == cfg.steps)) row.eval_recall_at_1 = eval_recall_at_1(net, *eval);
    if (progress) progress->rows.push_back(row);
    result.log.rows.push_back(std::move(row));
  }
  return result;
}

}  // namespace mdprop
