#include "mdprop/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "mdprop/errors.hpp"

namespace mdprop {

std::vector<std::vector<std::size_t>> Dataset::class_index() const {
  std::vector<std::vector<std::size_t>> idx(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) idx[static_cast<std::size_t>(labels[i])].push_back(i);
  return idx;
}

Tensor Dataset::rows(std::span<const std::size_t> idx) const {
  const std::size_t n = dim();
  std::vector<Scalar> out(idx.size() * n);
  auto F = features.data();
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(&F[idx[i] * n], n, &out[i * n]);
  return Tensor::from({idx.size(), n}, std::move(out));
}

void Dataset::validate() const {
  if (features.rows() != labels.size()) throw DataError("dataset: feature rows and label count differ");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw DataError("dataset: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

void SyntheticConfig::validate() const {
  if (classes < 2) throw ConfigError("synthetic: need at least 2 classes");
  if (per_class < 4) throw ConfigError("synthetic: need at least 4 samples per class");
  if (dim == 0) throw ConfigError("synthetic: dimension must be positive");
  if (!(center_spread >= 0) || !(cluster_sigma >= 0)) throw ConfigError("synthetic: scales must be non-negative");
  if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("synthetic: train fraction must lie in (0, 1)");
  for (const auto& p : overlap_pairs) {
    if (p.a < 0 || p.b < 0 || static_cast<std::size_t>(p.a) >= classes || static_cast<std::size_t>(p.b) >= classes ||
        p.a == p.b) {
      throw ConfigError("synthetic: overlap pair (" + std::to_string(p.a) + ", " + std::to_string(p.b) +
                        ") is not a pair of distinct classes");
    }
    if (!(p.fraction >= 0 && p.fraction <= 1)) {
      throw ConfigError("synthetic: overlap fraction must lie in [0, 1], got " + std::to_string(p.fraction));
    }
  }
}

std::pair<Dataset, Dataset> make_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t n = cfg.dim;
  std::vector<std::vector<double>> centers(cfg.classes, std::vector<double>(n));
  const double coord_scale = cfg.center_spread / std::sqrt(double(n));
  for (auto& c : centers)
    for (auto& v : c) v = coord_scale * normal(rng);
  for (const auto& p : cfg.overlap_pairs) {
    auto& ca = centers[p.a];
    auto& cb = centers[p.b];
    for (std::size_t j = 0; j < n; ++j) {
      const double gap = cb[j] - ca[j];
      ca[j] += 0.5 * p.fraction * gap;
      cb[j] -= 0.5 * p.fraction * gap;
    }
  }

  std::vector<std::vector<std::vector<Scalar>>> points(cfg.classes);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    for (std::size_t i = 0; i < cfg.per_class; ++i) {
      std::vector<Scalar> x(n);
      for (std::size_t j = 0; j < n; ++j) x[j] = static_cast<Scalar>(centers[c][j] + cfg.cluster_sigma * normal(rng));
      points[c].push_back(std::move(x));
    }
  }

  std::vector<Scalar> train_x, test_x;
  std::vector<int> train_y, test_y;
  const auto n_train =
      static_cast<std::size_t>(std::llround(cfg.train_fraction * double(cfg.per_class)));
  const std::size_t train_classes = (cfg.classes + 1) / 2;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    std::vector<std::size_t> order(cfg.per_class);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t r = 0; r < order.size(); ++r) {
      const bool to_train = cfg.class_disjoint ? c < train_classes : r < n_train;
      auto& xs = to_train ? train_x : test_x;
      auto& ys = to_train ? train_y : test_y;
      const auto& p = points[c][order[r]];
      xs.insert(xs.end(), p.begin(), p.end());
      ys.push_back(static_cast<int>(c));
    }
  }

  auto build = [&](std::vector<Scalar>& xs, std::vector<int>& ys, Split split) {
    Dataset ds;
    ds.features = Tensor::from({ys.size(), n}, std::move(xs));
    ds.labels = std::move(ys);
    ds.num_classes = cfg.classes;
    ds.split = split;
    std::ostringstream os;
    os << "synthetic(C=" << cfg.classes << ",per_class=" << cfg.per_class << ",N=" << n
       << ",spread=" << cfg.center_spread << ",sigma=" << cfg.cluster_sigma << ",seed=" << cfg.seed << ")";
    ds.provenance = os.str();
    return ds;
  };
  Dataset train = build(train_x, train_y, Split::kTrain);
  Dataset test = build(test_x, test_y, Split::kTest);
  return {std::move(train), std::move(test)};
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  if (*begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

Dataset parse_csv(const std::string& text, const LabelColumn& label_column, bool has_header,
                  const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  std::size_t label_at = 0;
  bool label_resolved = false;
  if (const auto* idx = std::get_if<std::size_t>(&label_column.which)) {
    label_at = *idx;
    label_resolved = true;
  }

  std::vector<Scalar> features;
  std::vector<std::string> raw_labels;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    for (auto& f : fields) f = trim(f);
    if (width == 0) {
      width = fields.size();
      if (width < 2) throw FormatError(origin + ":" + std::to_string(line_no) + ": need a label and at least one feature");
      if (has_header) {
        if (!label_resolved) {
          const auto& name = std::get<std::string>(label_column.which);
          auto it = std::find(fields.begin(), fields.end(), name);
          if (it == fields.end()) throw FormatError(origin + ": no column named '" + name + "' in header");
          label_at = static_cast<std::size_t>(it - fields.begin());
          label_resolved = true;
        }
        continue;
      }
      if (!label_resolved) throw FormatError(origin + ": label column given by name but file has no header");
    }
    if (fields.size() != width) {
      throw FormatError(origin + ":" + std::to_string(line_no) + ": expected " + std::to_string(width) +
                        " fields, found " + std::to_string(fields.size()));
    }
    if (label_at >= width) throw FormatError(origin + ": label column " + std::to_string(label_at) + " out of range");
    for (std::size_t j = 0; j < width; ++j) {
      if (j == label_at) {
        raw_labels.push_back(fields[j]);
        continue;
      }
      double v;
      if (!parse_number(fields[j], v)) {
        throw FormatError(origin + ":" + std::to_string(line_no) + ": non-numeric feature '" + fields[j] + "'");
      }
      features.push_back(static_cast<Scalar>(v));
    }
  }
  if (raw_labels.empty()) throw FormatError(origin + ": no data rows");

  Dataset ds;
  bool all_int = true;
  std::vector<long long> ints;
  for (const auto& s : raw_labels) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || v < 0) {
      all_int = false;
      break;
    }
    ints.push_back(v);
  }
  if (all_int) {
    std::map<long long, int> dense;
    for (auto v : ints) dense.emplace(v, 0);
    int next = 0;
    bool identity = true;
    for (auto& [k, v] : dense) {
      v = next++;
      identity = identity && k == v;
    }
    for (auto v : ints) ds.labels.push_back(dense[v]);
    for (auto& [k, v] : dense) ds.label_names.push_back(std::to_string(k));
    if (identity) ds.label_names.clear();
  } else {
    std::map<std::string, int> mapping;
    for (const auto& s : raw_labels) {
      auto [it, inserted] = mapping.emplace(s, static_cast<int>(ds.label_names.size()));
      if (inserted) ds.label_names.push_back(s);
      ds.labels.push_back(it->second);
    }
  }
  int max_label = *std::max_element(ds.labels.begin(), ds.labels.end());
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  ds.features = Tensor::from({ds.labels.size(), width - 1}, std::move(features));
  ds.provenance = origin;
  return ds;
}

Dataset load_csv(const std::string& path, const LabelColumn& label_column, bool has_header) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), label_column, has_header, path);
}

std::string format_csv(const Dataset& ds, bool header) {
  std::string out;
  const std::size_t n = ds.dim();
  if (header) {
    for (std::size_t j = 0; j < n; ++j) out += "f" + std::to_string(j) + ",";
    out += "label\n";
  }
  char buf[64];
  auto F = ds.features.data();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), F[i * n + j]);
      out.append(buf, ptr);
      out += ',';
    }
    out += std::to_string(ds.labels[i]);
    out += '\n';
  }
  return out;
}

void save_csv(const Dataset& ds, const std::string& path, bool header) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << format_csv(ds, header);
}

double one_nn_accuracy(const Dataset& train, const Dataset& test) {
  const std::size_t n = train.dim();
  auto A = train.features.data();
  auto B = test.features.data();
  std::size_t correct = 0;
  for (std::size_t q = 0; q < test.size(); ++q) {
    double best = std::numeric_limits<double>::infinity();
    int label = -1;
    for (std::size_t i = 0; i < train.size(); ++i) {
      double d = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double diff = double(B[q * n + j]) - A[i * n + j];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        label = train.labels[i];
      }
    }
    correct += label == test.labels[q] ? 1 : 0;
  }
  return test.size() ? double(correct) / double(test.size()) : 0.0;
}

}  // namespace mdprop
