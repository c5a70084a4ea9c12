#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "mdprop/errors.hpp"
#include "mdprop/trainer.hpp"
#include "test_util.hpp"
#include "trainer_checks.hpp"

using namespace mdprop;

namespace {

Dataset toy_dataset(std::size_t classes, std::size_t per_class, std::size_t dim = 3) {
  Dataset d;
  std::vector<Scalar> v;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t j = 0; j < dim; ++j) v.push_back(static_cast<Scalar>(c * 10 + i + j * 0.1));
      d.labels.push_back(static_cast<int>(c));
    }
  }
  d.features = Tensor::from({classes * per_class, dim}, v);
  d.num_classes = classes;
  return d;
}

Batch toy_batch(const Dataset& d, std::vector<std::size_t> idx) {
  Batch b;
  b.x = d.rows(idx);
  for (auto i : idx) b.labels.push_back(d.labels[i]);
  b.indices = std::move(idx);
  return b;
}

TrainConfig small_config(Method m, std::uint64_t seed = 0) {
  TrainConfig c;
  c.method = m;
  c.seed = seed;
  c.batch_size = 24;
  c.arch.hidden = {32, 32};
  return c;
}

std::vector<Scalar> all_grads(const MultiBNNetwork& net) {
  std::vector<Scalar> g;
  for (const auto& p : net.parameters()) {
    if (p.has_grad()) {
      g.insert(g.end(), p.grad().begin(), p.grad().end());
    } else {
      g.insert(g.end(), p.numel(), Scalar{0});
    }
  }
  return g;
}

}  // namespace

TEST_CASE("config validation enforces the per-method invariants") {
  TrainConfig c;
  c.validate();
  c.k_distributions = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = {};
  c.method = Method::kAdvPropD;
  c.k_distributions = 2;
  c.per_distribution = {trainer_checks::stax(0.1f)};
  c.validate();
  c.per_distribution[0].generator = GeneratorKind::kMtax;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = {};
  c.method = Method::kMDProp;
  c.k_distributions = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.k_distributions = 3;
  c.per_distribution = {trainer_checks::stax(0.1f)};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.per_distribution.push_back(trainer_checks::stax(0.1f));
  c.validate();
  c.per_distribution[0].attack.targets = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = {};
  c.method = Method::kAT;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.per_distribution = {trainer_checks::stax(0.1f)};
  c.validate();
}

TEST_CASE("method, generator and loss names round trip") {
  for (Method m : {Method::kST, Method::kAT, Method::kAdvPropD, Method::kMDProp}) CHECK(parse_method(to_string(m)) == m);
  for (GeneratorKind g : {GeneratorKind::kNone, GeneratorKind::kStax, GeneratorKind::kMtax})
    CHECK(parse_generator(to_string(g)) == g);
  for (LossKind l : {LossKind::kMultisim, LossKind::kArcFace}) CHECK(parse_loss(to_string(l)) == l);
  CHECK_THROWS_AS(parse_method("sgd"), ConfigError);
}

TEST_CASE("sample_batch: exhaustive draw, determinism and errors") {
  auto d = toy_dataset(4, 3);
  std::mt19937_64 rng(1);
  auto full = sample_batch(d, 12, rng);
  auto sorted = full.indices;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 12; ++i) CHECK(sorted[i] == i);
  CHECK(full.indices != sorted);

  std::mt19937_64 a(5), b(5);
  for (int i = 0; i < 10; ++i) CHECK(sample_batch(d, 6, a).indices == sample_batch(d, 6, b).indices);
  CHECK_THROWS_AS(sample_batch(d, 13, rng), DataError);
}

TEST_CASE("sample_batch gives every included class at least two samples") {
  auto d = toy_dataset(8, 10);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 500; ++i) {
    auto b = sample_batch(d, 16, rng);
    std::set<std::size_t> distinct(b.indices.begin(), b.indices.end());
    CHECK(distinct.size() == 16);
    std::map<int, int> count;
    for (int y : b.labels) ++count[y];
    for (auto [y, n] : count) CHECK(n >= 2);
  }
}

TEST_CASE("sample_batch class frequencies are uniform within 5%") {
  auto d = toy_dataset(4, 20);
  std::mt19937_64 rng(3);
  std::map<int, double> count;
  const int draws = 1000;
  for (int i = 0; i < draws; ++i) {
    for (int y : sample_batch(d, 6, rng).labels) count[y] += 1;
  }
  for (auto [y, n] : count) {
    INFO("class " << y << " count " << n);
    CHECK(std::abs(n / (draws * 6.0) - 0.25) <= 0.05 * 0.25);
  }
}

TEST_CASE("select_targets: forced and saturated choices") {
  auto d2 = toy_dataset(2, 4);
  std::mt19937_64 rng(4);
  auto b2 = toy_batch(d2, {0, 1, 4, 5});
  auto s = select_targets(b2, 1, d2, rng);
  for (std::size_t i = 0; i < 4; ++i) CHECK(s.labels[i] == 1 - b2.labels[i]);
  CHECK_THROWS_AS(select_targets(b2, 2, d2, rng), TargetSelectionError);
  try {
    select_targets(b2, 2, d2, rng);
  } catch (const TargetSelectionError& e) {
    CHECK(std::string(e.what()).find("ineffective adversarial target selection") != std::string::npos);
  }

  auto d5 = toy_dataset(5, 3);
  auto b5 = toy_batch(d5, {0, 3, 6, 9, 12, 1});
  auto all = select_targets(b5, 4, d5, rng);
  for (std::size_t a = 0; a < 6; ++a) {
    std::set<int> got(all.labels.begin() + a * 4, all.labels.begin() + (a + 1) * 4);
    std::set<int> want;
    for (int c = 0; c < 5; ++c)
      if (c != b5.labels[a]) want.insert(c);
    CHECK(got == want);
  }
}

TEST_CASE("select_targets invariants over ten thousand draws") {
  auto d = toy_dataset(6, 5, 2);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> tdist(1, 5);
  for (int draw = 0; draw < 10000; ++draw) {
    auto batch = sample_batch(d, 8, rng);
    const std::size_t t = tdist(rng);
    auto s = select_targets(batch, t, d, rng);
    REQUIRE(s.labels.size() == 8 * t);
    REQUIRE(s.exemplars.rows() == 8 * t);
    for (std::size_t a = 0; a < 8; ++a) {
      std::set<int> seen;
      for (std::size_t j = 0; j < t; ++j) {
        const std::size_t r = a * t + j;
        const int y = s.labels[r];
        if (y == batch.labels[a] || !seen.insert(y).second || d.labels[s.indices[r]] != y) {
          FAIL("bad target at draw " << draw << " anchor " << a);
        }
        // The exemplar row holds the features of the recorded pool index.
        if (s.exemplars.at(r, 0) != d.features.at(s.indices[r], 0)) FAIL("exemplar row mismatch at draw " << draw);
      }
    }
  }
}

TEST_CASE("select_targets prefers batch members and falls back to the pool") {
  auto d = toy_dataset(3, 4);
  std::mt19937_64 rng(6);
  // Batch holds classes 0 and 1 only; class 2 targets must come from the pool.
  auto b = toy_batch(d, {0, 1, 4, 5});
  std::set<std::size_t> batch_idx(b.indices.begin(), b.indices.end());
  for (int i = 0; i < 200; ++i) {
    auto s = select_targets(b, 2, d, rng);
    for (std::size_t r = 0; r < s.labels.size(); ++r) {
      if (s.labels[r] == 2) {
        CHECK(s.indices[r] >= 8);
      } else {
        CHECK(batch_idx.count(s.indices[r]) == 1);
      }
    }
  }
}

TEST_CASE("degeneration chain: MDProp K=1 equals ST, MDProp K=2 STAX equals AdvProp-D") {
  CHECK(trainer_checks::mdprop_k1_equals_st(0, 20) == "");
  CHECK(trainer_checks::mdprop_k2_stax_equals_advprop_d(0, 20, 0.3f) == "");
}

TEST_CASE("routing isolation") { CHECK(trainer_checks::routing_isolation(1) == ""); }

TEST_CASE("zero-budget generator: equal losses through identical BN sets") {
  auto [tr, te] = make_synthetic(testutil::small_data(2));
  auto cfg = small_config(Method::kMDProp, 2);
  cfg.k_distributions = 2;
  cfg.per_distribution = {trainer_checks::stax(0.0f)};
  auto net = init_network(cfg, tr.dim());
  auto state = make_train_state(net, cfg, tr.num_classes);
  auto batch = sample_batch(tr, 24, state.rng);
  auto rep = mdprop_step(net, batch, tr, cfg, state);
  REQUIRE(rep.losses.size() == 2);
  CHECK(rep.losses[0] == rep.losses[1]);
}

TEST_CASE("adversarial training with zero budget doubles the standard gradient") {
  auto [tr, te] = make_synthetic(testutil::small_data(3));
  auto at = small_config(Method::kAT, 3);
  at.per_distribution = {trainer_checks::stax(0.0f)};
  auto st = small_config(Method::kST, 3);
  auto net_a = init_network(at, tr.dim());
  auto net_s = init_network(st, tr.dim());
  auto state_a = make_train_state(net_a, at, tr.num_classes);
  auto state_s = make_train_state(net_s, st, tr.num_classes);
  auto batch = sample_batch(tr, 24, state_a.rng);
  auto ra = adversarial_training_step(net_a, batch, tr, at, state_a);
  auto rs = standard_step(net_s, batch, st, state_s);
  CHECK(ra.losses[0] == ra.losses[1]);
  CHECK(ra.losses[0] == rs.losses[0]);
  auto ga = all_grads(net_a), gs = all_grads(net_s);
  REQUIRE(ga.size() == gs.size());
  bool doubled = true;
  for (std::size_t i = 0; i < ga.size(); ++i) doubled = doubled && ga[i] == 2 * gs[i];
  CHECK(doubled);
}

TEST_CASE("adversarial training accepts a multi-targeted generator") {
  auto [tr, te] = make_synthetic(testutil::small_data(4));
  auto at = small_config(Method::kAT, 4);
  at.per_distribution = {trainer_checks::stax(0.3f)};
  at.per_distribution[0].generator = GeneratorKind::kMtax;
  at.per_distribution[0].attack.targets = 3;
  at.steps = 5;
  auto r = train(tr, at);
  CHECK(r.log.rows.size() == 5);
  CHECK(r.log.distributions == 2);
}

TEST_CASE("the summed update equals the sum of per-distribution gradients") {
  auto [tr, te] = make_synthetic(testutil::small_data(5));
  auto cfg = small_config(Method::kMDProp, 5);
  cfg.k_distributions = 2;
  cfg.bn_noise_sigma = 0.1f;
  cfg.per_distribution = {trainer_checks::stax(0.3f)};
  auto net = init_network(cfg, tr.dim());
  auto state = make_train_state(net, cfg, tr.num_classes);
  auto batch = sample_batch(tr, 24, state.rng);
  auto replica = net.clone();
  auto rng = state.rng;

  mdprop_step(net, batch, tr, cfg, state);
  const auto total = all_grads(net);

  // Regenerate the same adversarial batch, then take each loss's gradient on its own.
  auto sel = select_targets(batch, 1, tr, rng);
  auto adv = gen_stax(replica, 2, batch.x, batch.labels, sel, cfg.per_distribution[0].attack);
  auto params = replica.parameters();
  std::vector<Scalar> summed;
  std::vector<std::vector<Scalar>> parts;
  for (std::size_t k = 1; k <= 2; ++k) {
    GraphScope scope;
    const Tensor& x = k == 1 ? batch.x : adv.x_adv;
    Tensor loss = multisimilarity_loss(replica.forward(x, k, Mode::kTrain), batch.labels, cfg.multisim);
    std::vector<Scalar> g;
    for (auto& p : params) {
      auto gp = gradient(loss, p);
      if (gp.empty()) gp.assign(p.numel(), 0);
      g.insert(g.end(), gp.begin(), gp.end());
    }
    parts.push_back(std::move(g));
  }
  REQUIRE(parts[0].size() == total.size());
  bool equal = true;
  for (std::size_t i = 0; i < total.size(); ++i) equal = equal && total[i] == parts[0][i] + parts[1][i];
  CHECK(equal);
}

TEST_CASE("zero steps return the initialized network; same seed reproduces the checkpoint") {
  auto [tr, te] = make_synthetic(testutil::small_data(6));
  auto cfg = small_config(Method::kMDProp, 6);
  cfg.k_distributions = 3;
  cfg.per_distribution = {trainer_checks::stax(0.2f), trainer_checks::stax(0.2f)};
  cfg.per_distribution[1].generator = GeneratorKind::kMtax;
  cfg.per_distribution[1].attack.targets = 3;
  cfg.steps = 0;
  CHECK(train(tr, cfg).net.flat_state() == init_network(cfg, tr.dim()).flat_state());
  cfg.steps = 15;
  auto a = train(tr, cfg, &te);
  auto b = train(tr, cfg, &te);
  CHECK(save_checkpoint(a.net) == save_checkpoint(b.net));
  CHECK(a.log.to_csv() == b.log.to_csv());
}

TEST_CASE("train log layout") {
  auto [tr, te] = make_synthetic(testutil::small_data(7));
  auto cfg = small_config(Method::kMDProp, 7);
  cfg.k_distributions = 2;
  cfg.per_distribution = {trainer_checks::stax(0.2f)};
  cfg.steps = 12;
  cfg.eval_every = 5;
  auto r = train(tr, cfg, &te);
  const auto csv = r.log.to_csv();
  CHECK(csv.rfind("step,loss_1,loss_2,fooling_2,eval_r1\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
  std::size_t evals = 0;
  for (const auto& row : r.log.rows) evals += row.eval_recall_at_1.has_value();
  CHECK(evals == 3);  // steps 5, 10 and the last
  CHECK(r.log.summary_json().find("\"steps\"") != std::string::npos);
}

TEST_CASE("arcface training keeps finite losses") {
  auto [tr, te] = make_synthetic(testutil::small_data(8));
  auto cfg = small_config(Method::kMDProp, 8);
  cfg.loss = LossKind::kArcFace;
  cfg.k_distributions = 2;
  cfg.per_distribution = {trainer_checks::stax(0.2f)};
  cfg.steps = 20;
  auto r = train(tr, cfg);
  for (const auto& row : r.log.rows)
    for (double l : row.losses) CHECK(std::isfinite(l));
}

TEST_CASE("MDProp K=3 clean loss falls by half over 200 steps in most seeds") {
  int holding = 0;
  for (std::uint64_t seed : {0, 1, 2}) {
    auto [tr, te] = make_synthetic(trainer_checks::data_config(seed));
    TrainConfig cfg;
    cfg.method = Method::kMDProp;
    cfg.seed = seed;
    cfg.k_distributions = 3;
    cfg.per_distribution = {trainer_checks::stax(0.65f), trainer_checks::stax(0.65f)};
    cfg.per_distribution[1].generator = GeneratorKind::kMtax;
    cfg.per_distribution[1].attack.targets = 3;
    cfg.steps = 200;
    auto r = train(tr, cfg);
    auto avg = [&](std::size_t step) {
      double s = 0;
      for (std::size_t i = step - 5; i < step; ++i) s += r.log.rows[i].losses[0];
      return s / 5;
    };
    const double early = avg(10), late = avg(200);
    INFO("seed " << seed << ": " << early << " -> " << late);
    holding += late <= 0.5 * early;
  }
  CHECK(holding >= 2);
}
