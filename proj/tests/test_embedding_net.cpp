#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "mdprop/embedding_net.hpp"
#include "mdprop/errors.hpp"
#include "mdprop/trainer.hpp"
#include "test_util.hpp"

using namespace mdprop;

namespace {

ArchSpec small_arch() {
  ArchSpec a;
  a.input_dim = 6;
  a.hidden = {12, 10};
  a.embedding_dim = 4;
  return a;
}

MultiBNNetwork make_net(std::size_t k, std::uint64_t seed = 1, double sigma = 0) {
  InitConfig ic;
  ic.seed = seed;
  ic.bn_noise_sigma = static_cast<Scalar>(sigma);
  return MultiBNNetwork::init(small_arch(), k, ic);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.at(i)) - b.at(i)));
  return m;
}

std::vector<Scalar> bn_state(const BNParams& p) {
  std::vector<Scalar> v;
  for (const Tensor* t : {&p.gamma, &p.beta, &p.running_mean, &p.running_var}) {
    v.insert(v.end(), t->data().begin(), t->data().end());
  }
  return v;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / ("mdprop_net_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("every BN position holds K sets of matching width") {
  auto net = make_net(3);
  CHECK(net.k() == 3);
  CHECK(net.bn_positions() == 2);
  for (const auto& layer : net.layers()) {
    if (layer.bn.empty()) continue;
    CHECK(layer.bn.size() == 3);
    for (const auto& p : layer.bn) CHECK(p.width() == layer.out_dim());
  }
}

TEST_CASE("zero noise gives identical BN sets; same seed gives identical networks") {
  auto net = make_net(3, 9);
  for (const auto& layer : net.layers()) {
    for (const auto& p : layer.bn) CHECK(bn_state(p) == bn_state(layer.bn[0]));
  }
  CHECK(make_net(3, 9).flat_state() == net.flat_state());
  CHECK(make_net(3, 10).flat_state() != net.flat_state());
}

TEST_CASE("forward output rows are unit norm in both modes") {
  auto net = make_net(2);
  std::mt19937_64 rng(2);
  for (Mode m : {Mode::kTrain, Mode::kEval}) {
    auto y = net.forward(testutil::randn({8, 6}, rng, 4), 2, m);
    for (std::size_t i = 0; i < 8; ++i) {
      double ss = 0;
      for (std::size_t j = 0; j < 4; ++j) ss += double(y.at(i, j)) * y.at(i, j);
      CHECK(std::abs(std::sqrt(ss) - 1) < 1e-5);
    }
  }
}

TEST_CASE("eval forward is pure and identical sets route identically") {
  auto net = make_net(2);
  std::mt19937_64 rng(4);
  auto x = testutil::randn({5, 6}, rng);
  const auto before = net.flat_state();
  auto a = net.forward(x, 1, Mode::kEval);
  auto b = net.forward(x, 1, Mode::kEval);
  CHECK(a.to_vector() == b.to_vector());
  CHECK(net.flat_state() == before);
  CHECK(net.forward(x, 2, Mode::kEval).to_vector() == a.to_vector());
}

TEST_CASE("bn_index out of range is an index error") {
  auto net = make_net(2);
  auto x = Tensor::zeros({2, 6});
  CHECK_THROWS_AS(net.forward(x, 0, Mode::kEval), IndexError);
  CHECK_THROWS_AS(net.forward(x, 3, Mode::kEval), IndexError);
}

TEST_CASE("train-mode forward only mutates the routed BN set") {
  std::mt19937_64 rng(6);
  for (std::size_t j = 1; j <= 3; ++j) {
    auto net = make_net(3, 1, 0.1);
    std::vector<std::vector<Scalar>> before;
    for (const auto& layer : net.layers())
      for (const auto& p : layer.bn) before.push_back(bn_state(p));
    net.forward(testutil::randn({8, 6}, rng, 2), j, Mode::kTrain);
    std::size_t idx = 0;
    for (const auto& layer : net.layers()) {
      for (std::size_t k = 0; k < layer.bn.size(); ++k, ++idx) {
        if (k + 1 == j) {
          CHECK(bn_state(layer.bn[k]) != before[idx]);
        } else {
          CHECK(bn_state(layer.bn[k]) == before[idx]);
        }
      }
    }
  }
}

TEST_CASE("an update driven through set 2 changes set 1 outputs") {
  auto net = make_net(2);
  std::mt19937_64 rng(8);
  auto x = testutil::randn({6, 6}, rng);
  auto before = net.forward(x, 1, Mode::kEval);
  Adam opt(net.parameters(), AdamConfig{});
  {
    GraphScope scope;
    auto y = net.forward(testutil::randn({6, 6}, rng), 2, Mode::kTrain);
    backward(sum(mul(y, testutil::randn({6, 4}, rng))));
  }
  opt.step();
  CHECK(max_abs_diff(before, net.forward(x, 1, Mode::kEval)) > 0);
}

TEST_CASE("inference view shares weights and set 1") {
  auto net = make_net(3, 1, 0.2);
  auto view = net.inference_view();
  CHECK(view.k() == 1);
  CHECK(view.layers()[0].weight.same_storage(net.layers()[0].weight));
  std::mt19937_64 rng(10);
  for (int i = 0; i < 20; ++i) {
    auto x = testutil::randn({3, 6}, rng);
    CHECK(view.forward(x, 1, Mode::kEval).to_vector() == net.forward(x, 1, Mode::kEval).to_vector());
  }
  auto plain = make_net(3);
  auto x = testutil::randn({4, 6}, rng);
  auto pv = plain.inference_view().forward(x, 1, Mode::kEval);
  for (std::size_t k = 1; k <= 3; ++k) CHECK(plain.forward(x, k, Mode::kEval).to_vector() == pv.to_vector());

  auto reloaded = load_checkpoint(save_checkpoint(view));
  CHECK(reloaded.forward(x, 1, Mode::kEval).to_vector() == view.forward(x, 1, Mode::kEval).to_vector());
}

TEST_CASE("checkpoint round trip is bit exact") {
  auto net = make_net(3, 4, 0.3);
  std::mt19937_64 rng(12);
  net.forward(testutil::randn({8, 6}, rng), 2, Mode::kTrain);
  auto bytes = save_checkpoint(net);
  auto back = load_checkpoint(bytes);
  CHECK(save_checkpoint(back) == bytes);
  CHECK(back.flat_state() == net.flat_state());
  auto x = testutil::randn({5, 6}, rng);
  for (std::size_t k = 1; k <= 3; ++k)
    CHECK(back.forward(x, k, Mode::kEval).to_vector() == net.forward(x, k, Mode::kEval).to_vector());
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MDPK");
}

TEST_CASE("corrupt or truncated checkpoints are format errors") {
  auto bytes = save_checkpoint(make_net(2));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint(bad), FormatError);
  auto wrong_version = bytes;
  wrong_version[4] = 9;
  CHECK_THROWS_AS(load_checkpoint(wrong_version), FormatError);
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
  CHECK_THROWS_AS(load_checkpoint(cut), FormatError);
  auto longer = bytes;
  longer.push_back(0);
  CHECK_THROWS_AS(load_checkpoint(longer), FormatError);
}

TEST_CASE("a K=1 checkpoint seeds all sets of a K=3 network, with noise on the extra sets") {
  TempDir tmp;
  auto base = make_net(1, 21);
  const auto path = (tmp.path / "base.mdpk").string();
  write_checkpoint_file(base, path);

  const double sigma = 0.05;
  InitConfig ic;
  ic.seed = 99;
  ic.pretrained_checkpoint = path;
  ic.bn_noise_sigma = static_cast<Scalar>(sigma);
  auto net = MultiBNNetwork::init(small_arch(), 3, ic);
  CHECK(net.k() == 3);
  CHECK(net.layers()[0].weight.to_vector() == base.layers()[0].weight.to_vector());

  std::vector<double> diffs;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const auto& layer = net.layers()[l];
    if (layer.bn.empty()) continue;
    CHECK(bn_state(layer.bn[0]) == bn_state(base.layers()[l].bn[0]));
    for (std::size_t k = 1; k < 3; ++k) {
      for (std::size_t i = 0; i < layer.out_dim(); ++i) {
        diffs.push_back(double(layer.bn[k].gamma.at(i)) - layer.bn[0].gamma.at(i));
        diffs.push_back(double(layer.bn[k].beta.at(i)) - layer.bn[0].beta.at(i));
      }
    }
  }
  double mean = 0, var = 0;
  for (double d : diffs) mean += d;
  mean /= double(diffs.size());
  for (double d : diffs) var += (d - mean) * (d - mean);
  const double sd = std::sqrt(var / double(diffs.size() - 1));
  // 88 draws: the sample sd is within 25% of sigma with overwhelming probability.
  CHECK(std::abs(mean) < 3 * sigma / std::sqrt(double(diffs.size())) + 1e-9);
  CHECK(sd == doctest::Approx(sigma).epsilon(0.25));

  ArchSpec other = small_arch();
  other.hidden = {12, 11};
  CHECK_THROWS_AS(MultiBNNetwork::init(other, 3, ic), FormatError);
}

TEST_CASE("training with distinct data per set separates set 1 and set 2 outputs") {
  auto [train_set, test_set] = make_synthetic(testutil::small_data(3));
  TrainConfig cfg;
  cfg.method = Method::kMDProp;
  cfg.k_distributions = 2;
  DistributionSpec d;
  d.generator = GeneratorKind::kMtax;
  d.attack.eps = 0.5f;
  d.attack.targets = 2;
  cfg.per_distribution = {d};
  cfg.steps = 50;
  cfg.batch_size = 24;
  cfg.arch.hidden = {32, 32};
  cfg.seed = 3;
  auto r = train(train_set, cfg);
  auto a = r.net.forward(test_set.features, 1, Mode::kEval);
  auto b = r.net.forward(test_set.features, 2, Mode::kEval);
  CHECK(max_abs_diff(a, b) > 1e-3);
}
