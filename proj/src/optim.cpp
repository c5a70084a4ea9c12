#include "mdprop/optim.hpp"

#include <cmath>
#include <string>

#include "mdprop/errors.hpp"

namespace mdprop {

void AdamConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("adam: learning rate must be positive, got " + std::to_string(lr));
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("adam: betas must lie in [0, 1)");
  }
  if (!(eps > 0)) throw ConfigError("adam: eps must be positive");
  if (weight_decay < 0) throw ConfigError("adam: weight decay must be non-negative");
}

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  m_.resize(params_.size());
  v_.resize(params_.size());
  t_.assign(params_.size(), 0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].numel(), 0.0);
    v_[i].assign(params_[i].numel(), 0.0);
  }
}

void Adam::step() {
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& param = params_[p];
    if (!param.has_grad()) continue;
    const auto t = ++t_[p];
    const double c1 = 1.0 - std::pow(b1, double(t));
    const double c2 = 1.0 - std::pow(b2, double(t));
    auto w = param.mutable_data();
    auto g = param.grad();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = double(g[i]) + double(config_.weight_decay) * w[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] = static_cast<Scalar>(w[i] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace mdprop
