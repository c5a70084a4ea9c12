#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mdprop/embedding_net.hpp"
#include "mdprop/tensor.hpp"

namespace mdprop {

// Embeddings with labels. Distances everywhere are Euclidean.
struct EmbeddingSet {
  Tensor embeddings;  // [M × D]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return embeddings.cols(); }
  // label → member indices, for labels that occur.
  std::map<int, std::vector<std::size_t>> class_index() const;
  void validate() const;
};

// Fraction of queries with a same-class sample among their k nearest
// neighbors (self excluded). Ties are broken by lower index.
double recall_at_k(const EmbeddingSet& set, std::size_t k);

// Queries ranked against a separate gallery. When `exclude_matching_index`
// is set, gallery row i is skipped for query i (the query's clean twin).
double recall_at_k(const EmbeddingSet& queries, const EmbeddingSet& gallery, std::size_t k,
                   bool exclude_matching_index);

struct KMeansConfig {
  std::size_t clusters = 2;
  std::size_t restarts = 10;
  std::size_t max_iter = 100;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  std::vector<std::size_t> assignment;
  std::vector<std::vector<double>> centers;
  double inertia = 0;
};

// Lloyd iterations from k-means++ seeding; best inertia over restarts.
KMeansResult kmeans(const Tensor& points, const KMeansConfig& cfg);

enum class NmiNormalization {
  kArithmetic,       // 2·I / (H(Ω) + H(Υ))
  kLiteral,  // I / (2·(H(Ω) + H(Υ)))
};

// NMI between two labelings given as integer ids.
double nmi_from_assignments(const std::vector<int>& clusters, const std::vector<int>& labels,
                            NmiNormalization norm = NmiNormalization::kArithmetic);

// k-means with one cluster per class, then NMI against the labels.
double nmi(const EmbeddingSet& set, std::uint64_t seed = 0,
           NmiNormalization norm = NmiNormalization::kArithmetic);

struct PiRatio {
  double intra = 0;
  double inter = 0;
  double ratio = 0;
};

PiRatio pi_ratio(const EmbeddingSet& set);

struct OverlapReport {
  std::vector<std::size_t> indices;    // samples inside the overlap region
  std::vector<bool> false_prediction;  // per index: closer to a foreign center than to its gallery neighbor
};

// Samples of a class j in `class_subset` whose distance to the center of
// every other class in the subset is at most tau.
OverlapReport detect_overlap(const EmbeddingSet& set, const std::vector<int>& class_subset, double tau);

// Median over samples of the distance to the nearest same-class sample.
double median_gallery_distance(const EmbeddingSet& set);

struct DiffStats {
  double mean = 0;
  double std = 0;
  double max_abs = 0;
};

struct BNDivergenceRow {
  std::size_t position = 0;  // 0-based BN position
  std::size_t set_a = 1;     // 1-based BN set ids, set_a < set_b
  std::size_t set_b = 2;
  DiffStats gamma;
  DiffStats beta;
};

std::vector<BNDivergenceRow> bn_divergence(const MultiBNNetwork& net);
std::string bn_divergence_csv(const std::vector<BNDivergenceRow>& rows);

struct AttackContext {
  std::string kind;  // stax | mtax
  double eps = 0;
  int steps = 0;
  std::size_t targets = 1;
  double fooling_rate = 0;
};

struct EvalReport {
  std::map<std::size_t, double> recall_at;
  double nmi = 0;
  double pi_intra = 0;
  double pi_inter = 0;
  double pi_ratio = 0;
  std::size_t overlap_count = 0;
  std::optional<AttackContext> attack;
};

std::string eval_report_json(const EvalReport& report);
// "R@1,R@4,NMI,pi_ratio" header and matching row.
std::string eval_report_csv_header();
std::string eval_report_csv_row(const EvalReport& report);

}  // namespace mdprop
