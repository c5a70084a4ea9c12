#include "mdprop/embedding_net.hpp"

#include <cmath>
#include <random>

#include "mdprop/errors.hpp"

namespace mdprop {

void ArchSpec::validate() const {
  if (input_dim == 0 || embedding_dim == 0) throw ConfigError("architecture widths must be positive");
  for (auto h : hidden) {
    if (h == 0) throw ConfigError("architecture widths must be positive");
  }
}

MultiBNNetwork::MultiBNNetwork(std::vector<Layer> layers, std::size_t k_distributions)
    : layers_(std::move(layers)), k_(k_distributions) {
  if (k_ == 0) throw ConfigError("network needs at least one BN set");
  if (layers_.empty()) throw ConfigError("network needs at least one layer");
  for (const auto& layer : layers_) {
    if (!layer.bn.empty() && layer.bn.size() != k_) {
      throw ConfigError("every BN position must hold exactly K parameter sets");
    }
  }
}

namespace {

void perturb(BNParams& set, std::mt19937_64& rng, Scalar sigma) {
  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto& v : set.gamma.mutable_data()) v += static_cast<Scalar>(sigma * noise(rng));
  for (auto& v : set.beta.mutable_data()) v += static_cast<Scalar>(sigma * noise(rng));
}

}  // namespace

MultiBNNetwork MultiBNNetwork::init(const ArchSpec& arch, std::size_t k_distributions, const InitConfig& config) {
  arch.validate();
  if (k_distributions == 0) throw ConfigError("K must be at least 1");
  if (config.bn_noise_sigma < 0) throw ConfigError("bn_noise_sigma must be non-negative");

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> widths{arch.input_dim};
  widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
  widths.push_back(arch.embedding_dim);

  std::vector<Layer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l], out = widths[l + 1];
    const bool hidden = l + 2 < widths.size();
    std::normal_distribution<double> he(0.0, std::sqrt(2.0 / double(in)));
    std::vector<Scalar> w(in * out);
    for (auto& v : w) v = static_cast<Scalar>(he(rng));
    Layer layer;
    layer.weight = Tensor::from({in, out}, std::move(w)).set_requires_grad();
    layer.bias = Tensor::zeros({out}).set_requires_grad();
    layer.activation = hidden ? Activation::kRelu : Activation::kNone;
    if (hidden) layer.bn.push_back(BNParams::identity(out));
    layers.push_back(std::move(layer));
  }

  std::size_t loaded_sets = 1;
  if (config.pretrained_checkpoint) {
    MultiBNNetwork pre = read_checkpoint_file(*config.pretrained_checkpoint);
    if (pre.layers_.size() != layers.size()) {
      throw FormatError("checkpoint has " + std::to_string(pre.layers_.size()) + " layers, architecture has " +
                        std::to_string(layers.size()));
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Layer& src = pre.layers_[l];
      Layer& dst = layers[l];
      if (src.weight.shape() != dst.weight.shape() || src.bn.empty() != dst.bn.empty()) {
        throw FormatError("checkpoint layer " + std::to_string(l) + " has shape " + shape_str(src.weight.shape()) +
                          ", expected " + shape_str(dst.weight.shape()));
      }
      dst.weight = src.weight;
      dst.bias = src.bias;
      if (!dst.bn.empty()) {
        dst.bn.clear();
        for (std::size_t k = 0; k < std::min(pre.k_, k_distributions); ++k) dst.bn.push_back(src.bn[k]);
      }
    }
    loaded_sets = std::min(pre.k_, k_distributions);
  }

  for (auto& layer : layers) {
    if (layer.bn.empty()) continue;
    while (layer.bn.size() < k_distributions) layer.bn.push_back(layer.bn.front().clone());
  }
  for (std::size_t k = loaded_sets; k < k_distributions; ++k) {
    for (auto& layer : layers) {
      if (!layer.bn.empty()) perturb(layer.bn[k], rng, config.bn_noise_sigma);
    }
  }
  return MultiBNNetwork(std::move(layers), k_distributions);
}

Tensor MultiBNNetwork::forward(const Tensor& x, std::size_t bn_index, Mode mode) {
  if (bn_index < 1 || bn_index > k_) {
    throw IndexError("bn_index " + std::to_string(bn_index) + " outside [1, " + std::to_string(k_) + "]");
  }
  if (x.dim() != 2 || x.cols() != input_dim()) {
    throw DimensionError("network expects [B x " + std::to_string(input_dim()) + "] input, got " +
                         shape_str(x.shape()));
  }
  Tensor h = x;
  for (auto& layer : layers_) {
    h = add_row(matmul(h, layer.weight), layer.bias);
    if (!layer.bn.empty()) h = batch_norm(h, layer.bn[bn_index - 1], mode);
    if (layer.activation == Activation::kRelu) h = relu(h);
  }
  return l2_normalize(h);
}

MultiBNNetwork MultiBNNetwork::inference_view() const {
  std::vector<Layer> layers;
  layers.reserve(layers_.size());
  for (const auto& layer : layers_) {
    Layer v;
    v.weight = layer.weight;
    v.bias = layer.bias;
    v.activation = layer.activation;
    if (!layer.bn.empty()) v.bn.push_back(layer.bn.front());
    layers.push_back(std::move(v));
  }
  return MultiBNNetwork(std::move(layers), 1);
}

MultiBNNetwork MultiBNNetwork::clone() const {
  std::vector<Layer> layers;
  for (const auto& layer : layers_) {
    Layer c;
    c.weight = layer.weight.clone();
    c.bias = layer.bias.clone();
    c.activation = layer.activation;
    for (const auto& set : layer.bn) c.bn.push_back(set.clone());
    layers.push_back(std::move(c));
  }
  return MultiBNNetwork(std::move(layers), k_);
}

std::vector<Tensor> MultiBNNetwork::parameters() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers_) {
    out.push_back(layer.weight);
    out.push_back(layer.bias);
    for (const auto& set : layer.bn) {
      out.push_back(set.gamma);
      out.push_back(set.beta);
    }
  }
  return out;
}

std::size_t MultiBNNetwork::bn_positions() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += layer.bn.empty() ? 0 : 1;
  return n;
}

std::vector<Scalar> MultiBNNetwork::flat_state() const {
  std::vector<Scalar> out;
  auto append = [&out](const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); };
  for (const auto& layer : layers_) {
    append(layer.weight);
    append(layer.bias);
    for (const auto& set : layer.bn) {
      append(set.gamma);
      append(set.beta);
      append(set.running_mean);
      append(set.running_var);
    }
  }
  return out;
}

}  // namespace mdprop
