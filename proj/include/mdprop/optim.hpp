#pragma once

#include <cstdint>
#include <vector>

#include "mdprop/tensor.hpp"

namespace mdprop {

struct AdamConfig {
  Scalar lr = static_cast<Scalar>(1e-3);
  Scalar beta1 = static_cast<Scalar>(0.9);
  Scalar beta2 = static_cast<Scalar>(0.999);
  Scalar eps = static_cast<Scalar>(1e-8);
  Scalar weight_decay = static_cast<Scalar>(4e-4);

  void validate() const;
};

// Adam with L2 weight decay folded into the gradient. Parameters whose grad
// buffer is empty are skipped for that step, so an unused BN set is left
// exactly as it was.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  void step();
  void zero_grad();

  std::int64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::vector<std::int64_t> t_;
  std::int64_t step_ = 0;
};

}  // namespace mdprop
