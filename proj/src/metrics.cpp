#include "mdprop/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mdprop/errors.hpp"

namespace mdprop {

namespace {

double dist(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.cols();
  auto A = a.data();
  auto B = b.data();
  double ss = 0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = double(A[i * d + c]) - B[j * d + c];
    ss += diff * diff;
  }
  return std::sqrt(ss);
}

double dist_to(const Tensor& a, std::size_t i, const std::vector<double>& p) {
  const std::size_t d = a.cols();
  auto A = a.data();
  double ss = 0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = double(A[i * d + c]) - p[c];
    ss += diff * diff;
  }
  return std::sqrt(ss);
}

std::map<int, std::vector<double>> class_centers(const EmbeddingSet& set) {
  std::map<int, std::vector<double>> centers;
  const std::size_t d = set.dim();
  auto E = set.embeddings.data();
  for (const auto& [label, members] : set.class_index()) {
    std::vector<double> c(d, 0.0);
    for (auto i : members)
      for (std::size_t j = 0; j < d; ++j) c[j] += E[i * d + j];
    for (auto& v : c) v /= double(members.size());
    centers.emplace(label, std::move(c));
  }
  return centers;
}

}  // namespace

std::map<int, std::vector<std::size_t>> EmbeddingSet::class_index() const {
  std::map<int, std::vector<std::size_t>> idx;
  for (std::size_t i = 0; i < labels.size(); ++i) idx[labels[i]].push_back(i);
  return idx;
}

void EmbeddingSet::validate() const {
  if (embeddings.dim() != 2 || embeddings.rows() != labels.size()) {
    throw DimensionError("embedding set: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(embeddings.shape()));
  }
}

double recall_at_k(const EmbeddingSet& set, std::size_t k) { return recall_at_k(set, set, k, true); }

double recall_at_k(const EmbeddingSet& queries, const EmbeddingSet& gallery, std::size_t k,
                   bool exclude_matching_index) {
  queries.validate();
  gallery.validate();
  const std::size_t available = gallery.size() - (exclude_matching_index ? 1 : 0);
  if (k == 0 || k > available) {
    throw ConfigError("recall@k: k=" + std::to_string(k) + " needs at least " + std::to_string(k + 1) +
                      " samples, have " + std::to_string(gallery.size()));
  }
  std::size_t hits = 0;
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    cand.clear();
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      if (exclude_matching_index && g == q) continue;
      cand.emplace_back(dist(queries.embeddings, q, gallery.embeddings, g), g);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t r = 0; r < k; ++r) {
      if (gallery.labels[cand[r].second] == queries.labels[q]) {
        ++hits;
        break;
      }
    }
  }
  return double(hits) / double(queries.size());
}

namespace {

KMeansResult kmeans_once(const Tensor& pts, std::size_t k, std::size_t max_iter, std::uint64_t seed) {
  const std::size_t m = pts.rows(), d = pts.cols();
  auto P = pts.data();
  std::mt19937_64 rng(seed);
  KMeansResult r;
  r.centers.reserve(k);

  auto row = [&](std::size_t i) { return std::vector<double>(P.begin() + i * d, P.begin() + (i + 1) * d); };
  std::uniform_int_distribution<std::size_t> first(0, m - 1);
  r.centers.push_back(row(first(rng)));
  std::vector<double> d2(m);
  while (r.centers.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < m; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : r.centers) best = std::min(best, std::pow(dist_to(pts, i, c), 2));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng), acc = 0;
      pick = m - 1;
      for (std::size_t i = 0; i < m; ++i) {
        acc += d2[i];
        if (acc >= target && d2[i] > 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);
    }
    r.centers.push_back(row(pick));
  }

  r.assignment.assign(m, k);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t best_c = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dc = dist_to(pts, i, r.centers[c]);
        if (dc < best) {
          best = dc;
          best_c = c;
        }
      }
      if (r.assignment[i] != best_c) {
        r.assignment[i] = best_c;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < m; ++i) {
      ++counts[r.assignment[i]];
      for (std::size_t j = 0; j < d; ++j) sums[r.assignment[i]][j] += P[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Re-seed an empty cluster at the point farthest from its center.
        std::size_t far = 0;
        double far_d = -1;
        for (std::size_t i = 0; i < m; ++i) {
          const double di = dist_to(pts, i, r.centers[r.assignment[i]]);
          if (di > far_d) {
            far_d = di;
            far = i;
          }
        }
        r.centers[c] = row(far);
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) r.centers[c][j] = sums[c][j] / double(counts[c]);
    }
  }
  r.inertia = 0;
  for (std::size_t i = 0; i < m; ++i) r.inertia += std::pow(dist_to(pts, i, r.centers[r.assignment[i]]), 2);
  return r;
}

}  // namespace

KMeansResult kmeans(const Tensor& points, const KMeansConfig& cfg) {
  if (cfg.clusters == 0 || points.rows() < cfg.clusters) {
    throw ConfigError("kmeans: " + std::to_string(points.rows()) + " points cannot form " +
                      std::to_string(cfg.clusters) + " clusters");
  }
  std::mt19937_64 seeder(cfg.seed);
  std::optional<KMeansResult> best;
  for (std::size_t r = 0; r < std::max<std::size_t>(cfg.restarts, 1); ++r) {
    auto run = kmeans_once(points, cfg.clusters, cfg.max_iter, seeder());
    if (!best || run.inertia < best->inertia) best = std::move(run);
  }
  return std::move(*best);
}

double nmi_from_assignments(const std::vector<int>& clusters, const std::vector<int>& labels, NmiNormalization norm) {
  if (clusters.size() != labels.size() || clusters.empty()) {
    throw DimensionError("nmi: assignment and label counts differ");
  }
  const double n = double(labels.size());
  std::map<int, double> pc, pl;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pc[clusters[i]] += 1;
    pl[labels[i]] += 1;
    joint[{clusters[i], labels[i]}] += 1;
  }
  auto entropy = [n](const std::map<int, double>& counts) {
    double h = 0;
    for (const auto& [k, c] : counts) h -= (c / n) * std::log(c / n);
    return h;
  };
  const double hc = entropy(pc), hl = entropy(pl);
  double mi = 0;
  for (const auto& [key, c] : joint) {
    mi += (c / n) * std::log((c * n) / (pc[key.first] * pl[key.second]));
  }
  if (hc + hl == 0) return 1.0;  // both labelings constant: identical partitions
  mi = std::max(mi, 0.0);
  return norm == NmiNormalization::kArithmetic ? 2.0 * mi / (hc + hl) : mi / (2.0 * (hc + hl));
}

double nmi(const EmbeddingSet& set, std::uint64_t seed, NmiNormalization norm) {
  set.validate();
  const auto classes = set.class_index();
  if (set.size() < classes.size()) throw ConfigError("nmi: fewer samples than classes");
  KMeansConfig cfg;
  cfg.clusters = classes.size();
  cfg.seed = seed;
  const auto km = kmeans(set.embeddings, cfg);
  std::vector<int> assign(km.assignment.begin(), km.assignment.end());
  return nmi_from_assignments(assign, set.labels, norm);
}

PiRatio pi_ratio(const EmbeddingSet& set) {
  set.validate();
  const auto classes = set.class_index();
  if (classes.size() < 2) throw ConfigError("pi_ratio: need at least two classes");
  double intra = 0;
  std::size_t pairs = 0;
  for (const auto& [label, members] : classes) {
    for (std::size_t a = 0; a < members.size(); ++a)
      for (std::size_t b = a + 1; b < members.size(); ++b) {
        intra += dist(set.embeddings, members[a], set.embeddings, members[b]);
        ++pairs;
      }
  }
  if (pairs == 0) throw ConfigError("pi_ratio: no class has two members, intra-class distance undefined");
  const auto centers = class_centers(set);
  double inter = 0;
  std::size_t center_pairs = 0;
  for (auto a = centers.begin(); a != centers.end(); ++a)
    for (auto b = std::next(a); b != centers.end(); ++b) {
      double ss = 0;
      for (std::size_t j = 0; j < a->second.size(); ++j) ss += std::pow(a->second[j] - b->second[j], 2);
      inter += std::sqrt(ss);
      ++center_pairs;
    }
  PiRatio r;
  r.intra = intra / double(pairs);
  r.inter = inter / double(center_pairs);
  r.ratio = r.inter > 0 ? r.intra / r.inter : std::numeric_limits<double>::infinity();
  return r;
}

OverlapReport detect_overlap(const EmbeddingSet& set, const std::vector<int>& class_subset, double tau) {
  set.validate();
  if (tau < 0) throw ConfigError("detect_overlap: tau must be non-negative");
  const std::set<int> subset(class_subset.begin(), class_subset.end());
  if (subset.size() < 2) throw ConfigError("detect_overlap: class subset needs at least two classes");
  const auto centers = class_centers(set);
  for (int c : subset) {
    if (!centers.count(c)) throw ConfigError("detect_overlap: class " + std::to_string(c) + " not present");
  }
  const auto classes = set.class_index();
  OverlapReport report;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const int own = set.labels[i];
    if (!subset.count(own)) continue;
    bool inside = true;
    double nearest_foreign = std::numeric_limits<double>::infinity();
    for (int k : subset) {
      if (k == own) continue;
      const double dk = dist_to(set.embeddings, i, centers.at(k));
      inside = inside && dk <= tau;
      nearest_foreign = std::min(nearest_foreign, dk);
    }
    if (!inside) continue;
    double gallery = std::numeric_limits<double>::infinity();
    for (auto j : classes.at(own)) {
      if (j != i) gallery = std::min(gallery, dist(set.embeddings, i, set.embeddings, j));
    }
    report.indices.push_back(i);
    report.false_prediction.push_back(std::isfinite(gallery) && nearest_foreign <= gallery);
  }
  return report;
}

double median_gallery_distance(const EmbeddingSet& set) {
  set.validate();
  std::vector<double> d;
  for (const auto& [label, members] : set.class_index()) {
    if (members.size() < 2) continue;
    for (auto i : members) {
      double best = std::numeric_limits<double>::infinity();
      for (auto j : members) {
        if (j != i) best = std::min(best, dist(set.embeddings, i, set.embeddings, j));
      }
      d.push_back(best);
    }
  }
  if (d.empty()) throw ConfigError("median gallery distance: no class has two members");
  std::sort(d.begin(), d.end());
  const std::size_t n = d.size();
  return n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

namespace {

DiffStats diff_stats(const Tensor& a, const Tensor& b) {
  DiffStats s;
  const std::size_t n = a.numel();
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = double(a.at(i)) - double(b.at(i));
  s.mean = std::accumulate(diff.begin(), diff.end(), 0.0) / double(n);
  double ss = 0;
  for (double v : diff) {
    ss += (v - s.mean) * (v - s.mean);
    s.max_abs = std::max(s.max_abs, std::abs(v));
  }
  s.std = n > 1 ? std::sqrt(ss / double(n - 1)) : 0.0;
  return s;
}

}  // namespace

std::vector<BNDivergenceRow> bn_divergence(const MultiBNNetwork& net) {
  if (net.k() < 2) throw ConfigError("bn_divergence: network has a single BN set");
  std::vector<BNDivergenceRow> rows;
  std::size_t position = 0;
  for (const auto& layer : net.layers()) {
    if (layer.bn.empty()) continue;
    for (std::size_t a = 0; a < layer.bn.size(); ++a)
      for (std::size_t b = a + 1; b < layer.bn.size(); ++b) {
        BNDivergenceRow row;
        row.position = position;
        row.set_a = a + 1;
        row.set_b = b + 1;
        row.gamma = diff_stats(layer.bn[a].gamma, layer.bn[b].gamma);
        row.beta = diff_stats(layer.bn[a].beta, layer.bn[b].beta);
        rows.push_back(row);
      }
    ++position;
  }
  return rows;
}

std::string bn_divergence_csv(const std::vector<BNDivergenceRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "position,set_a,set_b,dgamma_mean,dgamma_std,dgamma_max_abs,dbeta_mean,dbeta_std,dbeta_max_abs\n";
  for (const auto& r : rows) {
    os << r.position << ',' << r.set_a << ',' << r.set_b << ',' << r.gamma.mean << ',' << r.gamma.std << ','
       << r.gamma.max_abs << ',' << r.beta.mean << ',' << r.beta.std << ',' << r.beta.max_abs << '\n';
  }
  return os.str();
}

std::string eval_report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json recall = nlohmann::ordered_json::object();
  for (const auto& [k, v] : report.recall_at) recall[std::to_string(k)] = v;
  j["recall_at"] = recall;
  j["nmi"] = report.nmi;
  j["pi_intra"] = report.pi_intra;
  j["pi_inter"] = report.pi_inter;
  j["pi_ratio"] = report.pi_ratio;
  j["overlap_count"] = report.overlap_count;
  if (report.attack) {
    j["attack"] = {{"kind", report.attack->kind},
                   {"eps", report.attack->eps},
                   {"steps", report.attack->steps},
                   {"targets", report.attack->targets},
                   {"fooling_rate", report.attack->fooling_rate}};
  } else {
    j["attack"] = nullptr;
  }
  return j.dump(2);
}

std::string eval_report_csv_header() { return "R@1,R@4,NMI,pi_ratio"; }

std::string eval_report_csv_row(const EvalReport& report) {
  auto get = [&](std::size_t k) {
    auto it = report.recall_at.find(k);
    return it == report.recall_at.end() ? std::nan("") : it->second;
  };
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << get(1) << ',' << get(4) << ',' << report.nmi << ',' << report.pi_ratio;
  return os.str();
}

}  // namespace mdprop
