#include "mdprop/attack.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "mdprop/errors.hpp"
#include "mdprop/losses.hpp"

namespace mdprop {

Scalar AttackConfig::effective_step_size() const {
  return step_size ? *step_size : eps / static_cast<Scalar>(steps);
}

void AttackConfig::validate() const {
  if (!(eps >= 0)) throw ConfigError("attack: eps must be non-negative");
  if (steps < 1) throw ConfigError("attack: steps must be at least 1");
  if (step_size && !(*step_size >= 0)) throw ConfigError("attack: step size must be non-negative");
  if (targets < 1) throw ConfigError("attack: need at least one target");
  if (!(bounds.lo <= bounds.hi)) throw ConfigError("attack: input bounds are inverted");
}

Scalar euclidean(std::span<const Scalar> a, std::span<const Scalar> b) {
  double ss = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - b[i];
    ss += d * d;
  }
  return static_cast<Scalar>(std::sqrt(ss));
}

Tensor linf_project(const Tensor& delta, Scalar eps, const Tensor& x, const InputBounds& bounds) {
  if (delta.shape() != x.shape()) {
    throw DimensionError("linf_project: delta " + shape_str(delta.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<Scalar> out(delta.numel());
  auto D = delta.data();
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    Scalar d = std::clamp(D[i], -eps, eps);
    const Scalar moved = X[i] + d;
    if (moved > bounds.hi || moved < bounds.lo) {
      d = std::clamp(std::clamp(moved, bounds.lo, bounds.hi) - X[i], -eps, eps);
    }
    out[i] = d;
  }
  return Tensor::from(delta.shape(), std::move(out));
}

namespace {

Tensor apply_delta(const Tensor& x, const Tensor& delta, const InputBounds& bounds) {
  std::vector<Scalar> out(x.numel());
  auto X = x.data();
  auto D = delta.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(X[i] + D[i], bounds.lo, bounds.hi);
  return Tensor::from(x.shape(), std::move(out));
}

std::vector<Scalar> per_anchor_loss(const Tensor& emb, const Tensor& target_emb, std::size_t t, bool squared) {
  std::vector<Scalar> out(emb.rows());
  const std::size_t d = emb.cols();
  for (std::size_t b = 0; b < emb.rows(); ++b) {
    double acc = 0;
    for (std::size_t j = 0; j < t; ++j) {
      const Scalar dist = euclidean(emb.data().subspan(b * d, d), target_emb.data().subspan((b * t + j) * d, d));
      acc += squared ? double(dist) * dist : dist;
    }
    out[b] = static_cast<Scalar>(acc / double(t));
  }
  return out;
}

void validate_targets(const Tensor& x, std::span<const int> labels, const TargetSelection& targets,
                      const AttackConfig& cfg, bool distinct_classes) {
  const std::size_t b = x.rows();
  const std::size_t t = targets.targets_per_anchor;
  if (labels.size() != b) throw DimensionError("attack: label count does not match batch rows");
  if (t != cfg.targets) {
    throw ConfigError("attack: selection carries " + std::to_string(t) + " targets per anchor, config asks for " +
                      std::to_string(cfg.targets));
  }
  if (targets.labels.size() != b * t || targets.exemplars.rows() != b * t || targets.exemplars.cols() != x.cols()) {
    throw DimensionError("attack: target selection does not match batch of " + std::to_string(b) + " with T=" +
                         std::to_string(t));
  }
  for (std::size_t i = 0; i < b; ++i) {
    std::set<int> seen;
    for (std::size_t j = 0; j < t; ++j) {
      const int y = targets.labels[i * t + j];
      if (y == labels[i]) {
        throw TargetSelectionError("attack: anchor " + std::to_string(i) + " and its target share label " +
                                   std::to_string(y));
      }
      if (distinct_classes && !seen.insert(y).second) {
        throw TargetSelectionError("attack: anchor " + std::to_string(i) + " has repeated target class " +
                                   std::to_string(y));
      }
    }
  }
}

AdvBatch run_pgd(MultiBNNetwork& net, std::size_t bn_index, const Tensor& x, const TargetSelection& targets,
                 const AttackConfig& cfg, std::span<const Scalar> gallery_dist) {
  const std::size_t t = targets.targets_per_anchor;
  Tensor target_emb;
  Tensor clean_emb;
  {
    NoGradGuard no_grad;
    target_emb = net.forward(targets.exemplars, bn_index, Mode::kEval);
    clean_emb = net.forward(x, bn_index, Mode::kEval);
  }

  Tensor delta = Tensor::zeros(x.shape());
  if (cfg.random_start && cfg.eps > 0) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(-double(cfg.eps), double(cfg.eps));
    for (auto& d : delta.mutable_data()) d = static_cast<Scalar>(u(rng));
  }
  delta = linf_project(delta, cfg.eps, x, cfg.bounds);

  const Scalar step = cfg.effective_step_size();
  if (cfg.eps > 0 && step > 0) {
    for (int s = 0; s < cfg.steps; ++s) {
      GraphScope scope;
      Tensor x_in = apply_delta(x, delta, cfg.bounds).set_requires_grad();
      Tensor emb = net.forward(x_in, bn_index, Mode::kEval);
      Tensor loss = batched_attack_loss(emb, target_emb, t, cfg.squared);
      const auto grad = gradient(loss, x_in);
      auto d = delta.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const Scalar sign = grad[i] > 0 ? Scalar{1} : (grad[i] < 0 ? Scalar{-1} : Scalar{0});
        d[i] -= step * sign;
      }
      delta = linf_project(delta, cfg.eps, x, cfg.bounds);
    }
  }

  AdvBatch out;
  out.delta = delta;
  out.x_adv = apply_delta(x, delta, cfg.bounds);
  Tensor adv_emb;
  {
    NoGradGuard no_grad;
    adv_emb = net.forward(out.x_adv, bn_index, Mode::kEval);
  }
  out.loss_before = per_anchor_loss(clean_emb, target_emb, t, cfg.squared);
  out.loss_after = per_anchor_loss(adv_emb, target_emb, t, cfg.squared);
  out.targets.resize(x.rows());
  const std::size_t dim = adv_emb.cols();
  for (std::size_t b = 0; b < x.rows(); ++b) {
    bool fooled = false;
    for (std::size_t j = 0; j < t; ++j) {
      out.targets[b].push_back({targets.labels[b * t + j], targets.indices.empty() ? 0 : targets.indices[b * t + j]});
      if (!gallery_dist.empty()) {
        const Scalar d = euclidean(adv_emb.data().subspan(b * dim, dim), target_emb.data().subspan((b * t + j) * dim, dim));
        fooled = fooled || d <= gallery_dist[b];
      }
    }
    out.fooled_count += fooled ? 1 : 0;
  }
  return out;
}

}  // namespace

AdvBatch gen_stax(MultiBNNetwork& net, std::size_t bn_index, const Tensor& x, std::span<const int> labels,
                  const TargetSelection& targets, const AttackConfig& cfg, std::span<const Scalar> gallery_dist) {
  cfg.validate();
  if (cfg.targets != 1) throw ConfigError("gen_stax: single-targeted attack needs T = 1");
  validate_targets(x, labels, targets, cfg, false);
  return run_pgd(net, bn_index, x, targets, cfg, gallery_dist);
}

AdvBatch gen_mtax(MultiBNNetwork& net, std::size_t bn_index, const Tensor& x, std::span<const int> labels,
                  const TargetSelection& targets, const AttackConfig& cfg, std::span<const Scalar> gallery_dist) {
  cfg.validate();
  validate_targets(x, labels, targets, cfg, true);
  return run_pgd(net, bn_index, x, targets, cfg, gallery_dist);
}

FoolingResult fooling_check(std::span<const Scalar> adv_emb, std::span<const Scalar> anchor_emb,
                            std::span<const Scalar> gallery_emb, const Tensor& target_embs) {
  const std::size_t d = adv_emb.size();
  if (anchor_emb.size() != d || gallery_emb.size() != d || target_embs.cols() != d) {
    throw DimensionError("fooling_check: embedding widths disagree");
  }
  const Scalar reference = euclidean(anchor_emb, gallery_emb);
  FoolingResult r;
  for (std::size_t t = 0; t < target_embs.rows(); ++t) {
    const bool hit = euclidean(adv_emb, target_embs.data().subspan(t * d, d)) <= reference;
    r.per_target.push_back(hit);
    r.fooled = r.fooled || hit;
  }
  return r;
}

FoolingResult fooling_check(MultiBNNetwork& net_eval, const Tensor& x_adv, const Tensor& x_anchor,
                            const Tensor& x_gallery, const Tensor& target_embs) {
  NoGradGuard no_grad;
  Tensor a = net_eval.forward(x_adv, 1, Mode::kEval);
  Tensor c = net_eval.forward(x_anchor, 1, Mode::kEval);
  Tensor g = net_eval.forward(x_gallery, 1, Mode::kEval);
  return fooling_check(a.data(), c.data(), g.data(), target_embs);
}

}  // namespace mdprop
