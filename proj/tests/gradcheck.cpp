#include "gradcheck.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "mdprop/embedding_net.hpp"
#include "mdprop/losses.hpp"
#include "mdprop/tensor.hpp"

namespace gradcheck {
namespace {

using mdprop::Mode;
using mdprop::Tensor;

// Step relative to the magnitude of the perturbed value.
constexpr double kRelStep = 1e-3;

struct Rng {
  std::mt19937_64 eng;
  double normal(double sd = 1) { return std::normal_distribution<double>(0, sd)(eng); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng); }
  std::size_t index(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(eng); }

  Tensor gaussian(const mdprop::Shape& shape, double sd = 1) {
    std::vector<double> v(mdprop::shape_numel(shape));
    for (auto& x : v) x = normal(sd);
    return Tensor::from(shape, std::move(v));
  }
  Tensor uniform_tensor(const mdprop::Shape& shape, double lo, double hi) {
    std::vector<double> v(mdprop::shape_numel(shape));
    for (auto& x : v) x = uniform(lo, hi);
    return Tensor::from(shape, std::move(v));
  }
  // Values kept away from zero, for the kink of relu.
  Tensor off_zero(const mdprop::Shape& shape) {
    std::vector<double> v(mdprop::shape_numel(shape));
    for (auto& x : v) {
      do x = normal(); while (std::abs(x) < 0.05);
    }
    return Tensor::from(shape, std::move(v));
  }
  // Labels with at least two classes of at least two members each.
  std::vector<int> labels(std::size_t n, int classes) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % classes);
    std::shuffle(y.begin(), y.end(), eng);
    return y;
  }
};

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

// Scalarizes the op output with a fixed random weighting, so every output
// element contributes a distinct coefficient.
class Checker {
 public:
  Checker(Fn f, std::vector<Tensor> inputs, std::uint64_t seed) : f_(std::move(f)), inputs_(std::move(inputs)) {
    rng_.eng.seed(seed);
  }

  double loss_value() {
    mdprop::NoGradGuard ng;
    return scalarize(f_(inputs_)).item();
  }

  // Compares analytic and central-difference gradients for the inputs in `wrt`.
  bool check(const std::vector<std::size_t>& wrt, double& max_abs_err, std::string& detail) {
    for (auto i : wrt) inputs_[i].set_requires_grad(true);
    std::vector<std::vector<double>> analytic;
    {
      mdprop::GraphScope scope;
      Tensor loss = scalarize(f_(inputs_));
      for (auto i : wrt) analytic.push_back(mdprop::gradient(loss, inputs_[i]));
    }
    bool ok = true;
    for (std::size_t w = 0; w < wrt.size(); ++w) {
      Tensor& t = inputs_[wrt[w]];
      auto d = t.mutable_data();
      for (std::size_t j = 0; j < d.size(); ++j) {
        const double saved = d[j];
        const double h = kRelStep * std::max(1.0, std::abs(saved));
        d[j] = saved + h;
        const double up = loss_value();
        d[j] = saved - h;
        const double down = loss_value();
        d[j] = saved;
        const double numeric = (up - down) / (2 * h);
        const double err = std::abs(analytic[w][j] - numeric);
        max_abs_err = std::max(max_abs_err, err);
        if (err > kAtol + kRtol * std::abs(numeric) && ok) {
          ok = false;
          std::ostringstream os;
          os << "input " << wrt[w] << " element " << j << ": analytic " << analytic[w][j] << " numeric " << numeric;
          detail = os.str();
        }
      }
    }
    return ok;
  }

 private:
  Tensor scalarize(const Tensor& y) {
    if (weights_.numel() == 0) weights_ = rng_.gaussian(y.shape());
    return mdprop::sum(mdprop::mul(y, weights_));
  }

  Fn f_;
  std::vector<Tensor> inputs_;
  Tensor weights_;
  Rng rng_;
};

bool well_conditioned(const mdprop::MultiBNNetwork& net, const Tensor& x, std::size_t bn_index, Mode mode) {
  mdprop::NoGradGuard ng;
  Tensor h = x;
  for (const auto& layer : net.layers()) {
    h = mdprop::add_row(mdprop::matmul(h, layer.weight), layer.bias);
    if (!layer.bn.empty()) {
      auto bn = layer.bn[bn_index - 1].clone();
      h = mdprop::batch_norm(h, bn, mode);
    }
    if (layer.activation == mdprop::Activation::kRelu) {
      for (auto v : h.data())
        if (std::abs(v) < 0.05) return false;
      h = mdprop::relu(h);
    }
  }
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double n = 0;
    for (std::size_t j = 0; j < h.cols(); ++j) n += double(h.at(i * h.cols() + j)) * h.at(i * h.cols() + j);
    if (std::sqrt(n) < 0.3) return false;
  }
  return true;
}

struct Instance {
  Fn f;
  std::vector<Tensor> inputs;
  std::vector<std::size_t> wrt;
};

using Maker = std::function<Instance(Rng&)>;

std::vector<std::pair<std::string, Maker>> makers() {
  std::vector<std::pair<std::string, Maker>> m;
  auto dims = [](Rng& r) { return std::pair{r.index(2, 5), r.index(2, 5)}; };

  m.emplace_back("matmul", [=](Rng& r) {
    auto [a, b] = dims(r);
    const std::size_t c = r.index(1, 4);
    return Instance{[](const auto& in) { return mdprop::matmul(in[0], in[1]); }, {r.gaussian({a, b}), r.gaussian({b, c})}, {0, 1}};
  });
  m.emplace_back("transpose", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::transpose(in[0]); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("add", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::add(in[0], in[1]); }, {r.gaussian({a, b}), r.gaussian({a, b})}, {0, 1}};
  });
  m.emplace_back("sub", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::sub(in[0], in[1]); }, {r.gaussian({a, b}), r.gaussian({a, b})}, {0, 1}};
  });
  m.emplace_back("mul", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::mul(in[0], in[1]); }, {r.gaussian({a, b}), r.gaussian({a, b})}, {0, 1}};
  });
  m.emplace_back("add_row", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::add_row(in[0], in[1]); }, {r.gaussian({a, b}), r.gaussian({b})}, {0, 1}};
  });
  m.emplace_back("scale", [=](Rng& r) {
    auto [a, b] = dims(r);
    const double f = r.normal(2);
    return Instance{[f](const auto& in) { return mdprop::scale(in[0], f); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("add_scalar", [=](Rng& r) {
    auto [a, b] = dims(r);
    const double v = r.normal();
    return Instance{[v](const auto& in) { return mdprop::add_scalar(in[0], v); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("relu", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::relu(in[0]); }, {r.off_zero({a, b})}, {0}};
  });
  m.emplace_back("square", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::square(in[0]); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("exp", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::exp(in[0]); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("log1p", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::log1p(in[0]); }, {r.uniform_tensor({a, b}, -0.5, 3)}, {0}};
  });
  m.emplace_back("sqrt", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::sqrt(in[0]); }, {r.uniform_tensor({a, b}, 0.3, 3)}, {0}};
  });
  m.emplace_back("row_sum", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::row_sum(in[0]); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("sum", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::sum(in[0]); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("mean", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::mean(in[0]); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("gather", [=](Rng& r) {
    auto [a, b] = dims(r);
    std::vector<std::size_t> idx(r.index(1, 8));
    for (auto& i : idx) i = r.index(0, a * b - 1);
    return Instance{[idx](const auto& in) { return mdprop::gather(in[0], idx); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("gather_rows", [=](Rng& r) {
    auto [a, b] = dims(r);
    std::vector<std::size_t> idx(r.index(1, 6));
    for (auto& i : idx) i = r.index(0, a - 1);
    return Instance{[idx](const auto& in) { return mdprop::gather_rows(in[0], idx); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("l2_normalize", [=](Rng& r) {
    auto [a, b] = dims(r);
    return Instance{[](const auto& in) { return mdprop::l2_normalize(in[0]); }, {r.gaussian({a, b})}, {0}};
  });
  m.emplace_back("cross_entropy", [=](Rng& r) {
    auto [a, c] = dims(r);
    std::vector<int> y(a);
    for (auto& v : y) v = static_cast<int>(r.index(0, c - 1));
    return Instance{[y](const auto& in) { return mdprop::cross_entropy(in[0], y); }, {r.gaussian({a, c}, 2)}, {0}};
  });
  m.emplace_back("arc_margin", [=](Rng& r) {
    auto [a, c] = dims(r);
    std::vector<int> y(a);
    for (auto& v : y) v = static_cast<int>(r.index(0, c - 1));
    const double margin = r.uniform(0.1, 0.6);
    return Instance{[y, margin](const auto& in) { return mdprop::arc_margin(in[0], y, margin); },
                    {r.uniform_tensor({a, c}, -0.9, 0.9)},
                    {0}};
  });
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    const std::string name = mode == Mode::kTrain ? "batch_norm_train" : "batch_norm_eval";
    m.emplace_back(name, [=](Rng& r) {
      const std::size_t a = r.index(3, 6), b = r.index(2, 4);
      Tensor rm = r.gaussian({b});
      Tensor rv = r.uniform_tensor({b}, 0.5, 2);
      return Instance{[rm, rv, mode](const auto& in) {
                        mdprop::BNParams p{in[1], in[2], rm.clone(), rv.clone()};
                        return mdprop::batch_norm(in[0], p, mode);
                      },
                      {r.gaussian({a, b}, 1.5), r.uniform_tensor({b}, 0.5, 1.5), r.gaussian({b})},
                      {0, 1, 2}};
    });
  }
  for (auto rule : {mdprop::MiningRule::kStandard, mdprop::MiningRule::kLiteral}) {
    const std::string name = rule == mdprop::MiningRule::kStandard ? "multisimilarity" : "multisimilarity_literal";
    m.emplace_back(name, [=](Rng& r) {
      const int classes = static_cast<int>(r.index(2, 3));
      const std::size_t n = static_cast<std::size_t>(classes) * r.index(2, 3);
      auto y = r.labels(n, classes);
      mdprop::MultisimConfig cfg;
      cfg.mining = rule;
      // A wider margin keeps most pairs mined, so the check sees real gradients.
      cfg.margin_eps = 0.5;
      return Instance{[y, cfg](const auto& in) { return mdprop::multisimilarity_loss(mdprop::l2_normalize(in[0]), y, cfg); },
                      {r.gaussian({n, r.index(3, 5)})},
                      {0}};
    });
  }
  m.emplace_back("arcface", [=](Rng& r) {
    const std::size_t n = r.index(2, 5), c = r.index(2, 4), d = r.index(3, 5);
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(r.index(0, c - 1));
    mdprop::ArcFaceConfig cfg;
    cfg.scale = 4;
    return Instance{[y, cfg](const auto& in) { return mdprop::arcface_loss(mdprop::l2_normalize(in[0]), y, in[1], cfg); },
                    {r.gaussian({n, d}), r.gaussian({c, d})},
                    {0, 1}};
  });
  for (bool squared : {true, false}) {
    m.emplace_back(squared ? "attack_loss" : "attack_loss_plain", [=](Rng& r) {
      const std::size_t t = r.index(1, 4), d = r.index(2, 5);
      return Instance{[squared](const auto& in) { return mdprop::attack_loss(in[0], in[1], squared); },
                      {r.gaussian({1, d}), r.gaussian({t, d})},
                      {0, 1}};
    });
    m.emplace_back(squared ? "batched_attack_loss" : "batched_attack_loss_plain", [=](Rng& r) {
      const std::size_t b = r.index(1, 3), t = r.index(1, 3), d = r.index(2, 5);
      return Instance{[squared, t](const auto& in) { return mdprop::batched_attack_loss(in[0], in[1], t, squared); },
                      {r.gaussian({b, d}), r.gaussian({b * t, d})},
                      {0, 1}};
    });
  }
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    m.emplace_back(mode == Mode::kTrain ? "network_train" : "network_eval", [=](Rng& r) {
      // Redraw until no ReLU input sits near its kink and no output row is
      // near zero length, where differences at h would not be meaningful.
      for (;;) {
        mdprop::ArchSpec arch;
        arch.input_dim = r.index(2, 4);
        arch.hidden = {r.index(3, 5)};
        arch.embedding_dim = r.index(2, 3);
        mdprop::InitConfig ic;
        ic.seed = r.eng();
        ic.bn_noise_sigma = 0.1;
        auto net = std::make_shared<mdprop::MultiBNNetwork>(mdprop::MultiBNNetwork::init(arch, 2, ic));
        const std::size_t bn_index = r.index(1, 2);
        Tensor x = r.gaussian({r.index(3, 5), arch.input_dim});
        if (!well_conditioned(*net, x, bn_index, mode)) continue;
        std::vector<Tensor> inputs{x};
        std::vector<std::size_t> wrt{0};
        for (auto& p : net->parameters()) {
          wrt.push_back(inputs.size());
          inputs.push_back(p);
        }
        return Instance{[net, bn_index, mode](const auto& in) { return net->forward(in[0], bn_index, mode); },
                        std::move(inputs), std::move(wrt)};
      }
    });
  }
  return m;
}

}  // namespace

std::vector<OpResult> run_all(std::uint64_t seed, int instances_per_op) {
  std::vector<OpResult> out;
  std::uint64_t op_seed = seed;
  for (auto& [name, make] : makers()) {
    OpResult res;
    res.op = name;
    Rng rng;
    rng.eng.seed(++op_seed * 0x9e3779b97f4a7c15ULL);
    for (int i = 0; i < instances_per_op; ++i) {
      Instance inst = make(rng);
      Checker checker(inst.f, inst.inputs, rng.eng());
      std::string detail;
      ++res.instances;
      if (!checker.check(inst.wrt, res.max_abs_err, detail)) {
        ++res.failures;
        if (res.first_failure.empty()) res.first_failure = "instance " + std::to_string(i) + ", " + detail;
      }
    }
    out.push_back(std::move(res));
  }
  return out;
}

}  // namespace gradcheck
