#include "mdprop/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "mdprop/errors.hpp"

namespace mdprop {

void MultisimConfig::validate() const {
  if (!(alpha > 0) || !(beta > 0)) throw ConfigError("multisimilarity: alpha and beta must be positive");
  if (!(lambda > 0 && lambda < 1)) throw ConfigError("multisimilarity: lambda must lie in (0, 1)");
}

void ArcFaceConfig::validate() const {
  if (!(scale > 0)) throw ConfigError("arcface: scale must be positive");
  if (!(center_lr > 0)) throw ConfigError("arcface: center learning rate must be positive");
}

Tensor multisimilarity_loss(const Tensor& emb, std::span<const int> labels, const MultisimConfig& cfg) {
  cfg.validate();
  const std::size_t b = emb.rows();
  if (emb.dim() != 2 || labels.size() != b) {
    throw DimensionError("multisimilarity: " + std::to_string(labels.size()) + " labels for embeddings " +
                         shape_str(emb.shape()));
  }
  if (b < 2) throw DimensionError("multisimilarity: batch needs at least 2 rows");

  Tensor sim = matmul(emb, transpose(emb));
  auto S = sim.data();
  std::optional<Tensor> total;
  for (std::size_t i = 0; i < b; ++i) {
    Scalar min_pos = std::numeric_limits<Scalar>::infinity();
    Scalar max_neg = -std::numeric_limits<Scalar>::infinity();
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      const Scalar s = S[i * b + j];
      if (labels[j] == labels[i]) {
        min_pos = std::min(min_pos, s);
      } else {
        max_neg = std::max(max_neg, s);
      }
    }
    std::vector<std::size_t> pos, neg;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      const Scalar s = S[i * b + j];
      const bool same = labels[j] == labels[i];
      bool keep;
      if (cfg.mining == MiningRule::kStandard) {
        keep = same ? s < max_neg + cfg.margin_eps : s > min_pos - cfg.margin_eps;
      } else {
        keep = same ? s > min_pos - cfg.margin_eps : s < max_neg + cfg.margin_eps;
      }
      if (keep) (same ? pos : neg).push_back(i * b + j);
    }
    if (pos.empty() || neg.empty()) continue;

    // (1/α)·log(1 + Σ exp(−α(s − λ)))
    Tensor pos_term = scale(
        log1p(sum(exp(scale(add_scalar(gather(sim, pos), -cfg.lambda), -cfg.alpha)))), Scalar{1} / cfg.alpha);
    // (1/β)·log(1 + Σ exp(β(s − λ)))
    Tensor neg_term = scale(
        log1p(sum(exp(scale(add_scalar(gather(sim, neg), -cfg.lambda), cfg.beta)))), Scalar{1} / cfg.beta);
    Tensor term = add(pos_term, neg_term);
    total = total ? add(*total, term) : term;
  }
  if (!total) return Tensor::scalar(0);
  return scale(*total, Scalar{1} / static_cast<Scalar>(b));
}

Tensor arcface_loss(const Tensor& emb, std::span<const int> labels, const Tensor& centers, const ArcFaceConfig& cfg) {
  cfg.validate();
  if (emb.dim() != 2 || centers.dim() != 2 || emb.cols() != centers.cols()) {
    throw DimensionError("arcface: embeddings " + shape_str(emb.shape()) + " vs centers " +
                         shape_str(centers.shape()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= centers.rows()) {
      throw IndexError("arcface: label " + std::to_string(y) + " outside [0, " + std::to_string(centers.rows()) +
                       ")");
    }
  }
  Tensor cosines = matmul(emb, transpose(l2_normalize(centers)));
  Tensor logits = scale(arc_margin(cosines, labels, cfg.margin), cfg.scale);
  return cross_entropy(logits, labels);
}

namespace {

void normalize_rows(Tensor& t) {
  auto d = t.mutable_data();
  const std::size_t n = t.cols();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += double(d[i * n + j]) * d[i * n + j];
    const double norm = std::max(std::sqrt(ss), double(kNormEps));
    for (std::size_t j = 0; j < n; ++j) d[i * n + j] = static_cast<Scalar>(d[i * n + j] / norm);
  }
}

Tensor random_unit_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Scalar> v(rows * cols);
  for (auto& x : v) x = static_cast<Scalar>(normal(rng));
  Tensor t = Tensor::from({rows, cols}, std::move(v));
  normalize_rows(t);
  return t.set_requires_grad();
}

}  // namespace

ArcFaceHead::ArcFaceHead(std::size_t num_classes, std::size_t dim, std::uint64_t seed, ArcFaceConfig cfg)
    : centers_(random_unit_rows(num_classes, dim, seed)),
      cfg_(cfg),
      optimizer_({centers_}, AdamConfig{cfg.center_lr, Scalar(0.9), Scalar(0.999), Scalar(1e-8), Scalar(0)}) {
  cfg_.validate();
}

Tensor ArcFaceHead::loss(const Tensor& emb, std::span<const int> labels) const {
  return arcface_loss(emb, labels, centers_, cfg_);
}

void ArcFaceHead::step() {
  optimizer_.step();
  normalize_rows(centers_);
}

Tensor attack_loss(const Tensor& emb_adv, const Tensor& targets_emb, bool squared) {
  if (emb_adv.dim() != 2 || emb_adv.rows() != 1) {
    throw DimensionError("attack_loss: expected a single [1 x D] embedding, got " + shape_str(emb_adv.shape()));
  }
  return batched_attack_loss(emb_adv, targets_emb, targets_emb.rows(), squared);
}

Tensor batched_attack_loss(const Tensor& emb_adv, const Tensor& targets_emb, std::size_t targets_per_anchor,
                           bool squared) {
  if (targets_per_anchor == 0) throw DimensionError("attack_loss: need at least one target");
  if (emb_adv.dim() != 2 || targets_emb.dim() != 2 || emb_adv.cols() != targets_emb.cols() ||
      targets_emb.rows() != emb_adv.rows() * targets_per_anchor) {
    throw DimensionError("attack_loss: embeddings " + shape_str(emb_adv.shape()) + " vs targets " +
                         shape_str(targets_emb.shape()) + " with T=" + std::to_string(targets_per_anchor));
  }
  std::vector<std::size_t> repeat(targets_emb.rows());
  for (std::size_t r = 0; r < repeat.size(); ++r) repeat[r] = r / targets_per_anchor;
  Tensor diff = sub(gather_rows(emb_adv, repeat), targets_emb);
  Tensor per_target = row_sum(square(diff));
  if (!squared) per_target = sqrt(per_target);
  return scale(sum(per_target), Scalar{1} / static_cast<Scalar>(targets_per_anchor));
}

}  // namespace mdprop
