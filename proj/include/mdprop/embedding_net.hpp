#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdprop/tensor.hpp"

namespace mdprop {

// Layer widths of the MLP: input → hidden... → embedding.
struct ArchSpec {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t embedding_dim = 8;

  void validate() const;
};

struct InitConfig {
  std::uint64_t seed = 0;
  std::optional<std::string> pretrained_checkpoint;
  // Scale of the Gaussian noise added to γ and β of every auxiliary BN set.
  Scalar bn_noise_sigma = 0;
};

enum class Activation : std::uint8_t { kNone = 0, kRelu = 1 };

struct Layer {
  Tensor weight;            // [in × out], shared across BN sets
  Tensor bias;              // [out]
  std::vector<BNParams> bn;  // K sets, or empty for the head
  Activation activation = Activation::kNone;

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }
};

// MLP embedding model whose hidden affine layers are each followed by K
// switchable batch-norm parameter sets. The affine weights are shared by all
// sets; output rows are L2-normalized.
class MultiBNNetwork {
 public:
  MultiBNNetwork() = default;
  MultiBNNetwork(std::vector<Layer> layers, std::size_t k_distributions);

  static MultiBNNetwork init(const ArchSpec& arch, std::size_t k_distributions, const InitConfig& config);

  // bn_index is 1-based: set 1 is the clean/main set.
  Tensor forward(const Tensor& x, std::size_t bn_index, Mode mode);

  // K = 1 network aliasing the shared weights and BN set 1.
  MultiBNNetwork inference_view() const;

  // Fully independent copy of every tensor.
  MultiBNNetwork clone() const;

  std::vector<Tensor> parameters() const;

  std::size_t k() const { return k_; }
  std::size_t input_dim() const { return layers_.front().in_dim(); }
  std::size_t embedding_dim() const { return layers_.back().out_dim(); }
  std::size_t bn_positions() const;
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  // Every value (weights and BN state) in a fixed order, for bit comparisons.
  std::vector<Scalar> flat_state() const;

 private:
  std::vector<Layer> layers_;
  std::size_t k_ = 0;
};

// Binary checkpoint. Layout (little-endian):
//   "MDPK" | u16 version | u32 K | u32 layer count
//   per layer: u32 in | u32 out | u8 activation | u8 has_bn
//              f32 weight[in*out] (row-major) | f32 bias[out]
//              if has_bn, K times: f32 gamma[out] beta[out] mean[out] var[out]
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> save_checkpoint(const MultiBNNetwork& net);
MultiBNNetwork load_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint_file(const MultiBNNetwork& net, const std::string& path);
MultiBNNetwork read_checkpoint_file(const std::string& path);

}  // namespace mdprop
