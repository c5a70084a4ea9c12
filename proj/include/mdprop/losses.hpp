#pragma once

#include <optional>
#include <span>
#include <vector>

#include "mdprop/optim.hpp"
#include "mdprop/tensor.hpp"

namespace mdprop {

enum class MiningRule {
  kStandard,  // positives below max-negative + margin, negatives above min-positive - margin
  kLiteral,   // inequality directions taken literally from the original formula
};

struct MultisimConfig {
  Scalar alpha = 2;
  Scalar beta = 40;
  Scalar lambda = static_cast<Scalar>(0.5);
  Scalar margin_eps = static_cast<Scalar>(0.1);
  MiningRule mining = MiningRule::kStandard;

  void validate() const;
};

// Multi-similarity loss on cosine similarities of unit embeddings. An anchor
// contributes only when mining leaves it at least one positive and one
// negative; the sum of contributions is divided by the batch size.
Tensor multisimilarity_loss(const Tensor& emb, std::span<const int> labels, const MultisimConfig& cfg);

struct ArcFaceConfig {
  Scalar margin = static_cast<Scalar>(0.5);
  Scalar scale = 16;
  Scalar center_lr = static_cast<Scalar>(5e-4);

  void validate() const;
};

// Additive angular margin loss: cross-entropy over s·cos(θ_y + m) for the
// true class and s·cos(θ_j) for the rest.
Tensor arcface_loss(const Tensor& emb, std::span<const int> labels, const Tensor& centers, const ArcFaceConfig& cfg);

// Trainer-owned ArcFace class centers with their own optimizer. Rows are
// re-normalized to unit length after every update.
class ArcFaceHead {
 public:
  ArcFaceHead(std::size_t num_classes, std::size_t dim, std::uint64_t seed, ArcFaceConfig cfg);

  Tensor loss(const Tensor& emb, std::span<const int> labels) const;
  void step();
  void zero_grad() { optimizer_.zero_grad(); }

  const Tensor& centers() const { return centers_; }
  const ArcFaceConfig& config() const { return cfg_; }

 private:
  Tensor centers_;
  ArcFaceConfig cfg_;
  Adam optimizer_;
};

// Mean over the T target rows of the squared L2 distance to emb_adv[1×D].
Tensor attack_loss(const Tensor& emb_adv, const Tensor& targets_emb, bool squared = true);

// Sum over anchors of attack_loss, where rows [b·T, (b+1)·T) of targets_emb
// belong to anchor b.
Tensor batched_attack_loss(const Tensor& emb_adv, const Tensor& targets_emb, std::size_t targets_per_anchor,
                           bool squared = true);

}  // namespace mdprop
