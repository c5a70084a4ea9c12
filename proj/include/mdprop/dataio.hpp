#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <utility>
#include <variant>
#include <vector>

#include "mdprop/tensor.hpp"

namespace mdprop {

enum class Split { kTrain, kTest };

struct Dataset {
  Tensor features;  // [M × N]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  Split split = Split::kTrain;
  std::string provenance;
  std::vector<std::string> label_names;  // filled when labels came from strings

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
  // Member indices per class label.
  std::vector<std::vector<std::size_t>> class_index() const;
  Tensor rows(std::span<const std::size_t> idx) const;
  void validate() const;
};

struct OverlapPair {
  int a = 0;
  int b = 1;
  double fraction = 0.8;  // 1.0 merges the two centers
};

struct SyntheticConfig {
  std::size_t classes = 8;
  std::size_t per_class = 40;
  std::size_t dim = 32;
  double center_spread = 5.0;
  double cluster_sigma = 1.0;
  std::vector<OverlapPair> overlap_pairs = {OverlapPair{0, 1, 0.8}};
  double train_fraction = 0.7;
  bool class_disjoint = false;
  std::uint64_t seed = 0;

  void validate() const;
};

// Gaussian class clusters with centers of norm ≈ center_spread. Each
// overlap pair moves both centers toward their midpoint by fraction / 2 of
// their separation. Split is stratified per class, or by class halves when
// class_disjoint is set.
std::pair<Dataset, Dataset> make_synthetic(const SyntheticConfig& cfg);

struct LabelColumn {
  std::variant<std::size_t, std::string> which = std::size_t{0};
};

// Labels that parse as integers are used as-is (densely remapped if needed);
// otherwise strings are mapped to 0, 1, ... in order of first appearance.
Dataset load_csv(const std::string& path, const LabelColumn& label_column, bool has_header);
Dataset parse_csv(const std::string& text, const LabelColumn& label_column, bool has_header,
                  const std::string& origin = "<memory>");

// Label in the last column, features printed in shortest round-trip form.
std::string format_csv(const Dataset& ds, bool header = true);
void save_csv(const Dataset& ds, const std::string& path, bool header = true);

// Fraction of test points whose nearest training point has the same label.
double one_nn_accuracy(const Dataset& train, const Dataset& test);

}  // namespace mdprop
