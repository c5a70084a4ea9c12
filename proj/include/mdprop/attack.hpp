#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "mdprop/embedding_net.hpp"
#include "mdprop/tensor.hpp"

namespace mdprop {

struct InputBounds {
  Scalar lo = -std::numeric_limits<Scalar>::infinity();
  Scalar hi = std::numeric_limits<Scalar>::infinity();
};

struct AttackConfig {
  Scalar eps = static_cast<Scalar>(0.01);  // L∞ budget
  int steps = 1;
  std::optional<Scalar> step_size;  // defaults to eps / steps
  std::size_t targets = 1;          // T
  bool random_start = false;
  std::uint64_t seed = 0;  // only used for the random start
  InputBounds bounds;
  bool squared = true;  // squared L2 attack loss; plain L2 otherwise

  Scalar effective_step_size() const;
  void validate() const;
};

// Per-anchor adversarial targets. Rows [b·T, (b+1)·T) of `exemplars` belong
// to anchor b; `labels` and `indices` follow the same layout.
struct TargetSelection {
  std::size_t targets_per_anchor = 1;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // exemplar index in the source pool
  Tensor exemplars;                  // [B·T × N] target inputs
};

struct AdvTarget {
  int label;
  std::size_t exemplar_index;
};

struct AdvBatch {
  Tensor x_adv;  // [B × N]
  Tensor delta;  // [B × N]
  std::vector<std::vector<AdvTarget>> targets;
  std::vector<Scalar> loss_before;  // attack loss per anchor at δ = 0
  std::vector<Scalar> loss_after;   // attack loss per anchor at the returned δ
  std::size_t fooled_count = 0;     // only meaningful when gallery distances were supplied
};

// Element-wise clamp of delta to [-eps, eps], then of x + delta to the bounds;
// returns the corrected delta.
Tensor linf_project(const Tensor& delta, Scalar eps, const Tensor& x, const InputBounds& bounds);

// Single-targeted feature-space attack. Signed-gradient steps descend the
// squared distance between f(x + δ) and the target embedding. Forward passes
// use eval-mode statistics of BN set `bn_index`; the network is not mutated.
//
// If `gallery_dist` is given (one entry per anchor: distance from the clean
// anchor embedding to its gallery sample), fooled_count is filled in.
AdvBatch gen_stax(MultiBNNetwork& net, std::size_t bn_index, const Tensor& x, std::span<const int> labels,
                  const TargetSelection& targets, const AttackConfig& cfg,
                  std::span<const Scalar> gallery_dist = {});

// Multi-targeted attack: the loss averages over T targets of distinct foreign
// classes per anchor.
AdvBatch gen_mtax(MultiBNNetwork& net, std::size_t bn_index, const Tensor& x, std::span<const int> labels,
                  const TargetSelection& targets, const AttackConfig& cfg,
                  std::span<const Scalar> gallery_dist = {});

struct FoolingResult {
  bool fooled = false;
  std::vector<bool> per_target;
};

// d(adv, target_t) ≤ d(anchor, gallery) for each target; fooled if any holds.
FoolingResult fooling_check(std::span<const Scalar> adv_emb, std::span<const Scalar> anchor_emb,
                            std::span<const Scalar> gallery_emb, const Tensor& target_embs);

// Same check computing embeddings through the main BN set in eval mode.
FoolingResult fooling_check(MultiBNNetwork& net_eval, const Tensor& x_adv, const Tensor& x_anchor,
                            const Tensor& x_gallery, const Tensor& target_embs);

Scalar euclidean(std::span<const Scalar> a, std::span<const Scalar> b);

}  // namespace mdprop
