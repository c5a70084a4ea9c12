#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mdprop/dataio.hpp"
#include "mdprop/trainer.hpp"

namespace mdprop {

// Flat configuration: keys are "section.key", or bare "key" before the
// first section header.
class ConfigMap {
 public:
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }
  // Sections present, e.g. {"network", "gen2"}.
  std::set<std::string> sections() const;

  // Layers `other` on top of this map.
  void merge(const ConfigMap& other);

 private:
  std::map<std::string, std::string> values_;
};

// key = value lines, '#' comments (';' at line start too), [section] headers. Text whose
// first non-blank character is '{' is read as JSON; nested objects become
// sections.
ConfigMap parse_config_text(const std::string& text, const std::string& origin = "<config>");
ConfigMap load_config_file(const std::string& path);

// L∞ budget of a generator when its spec string does not give one. Matches the
// desk benchmark's training attack.
inline constexpr double kDefaultGeneratorEps = 0.65;

// "stax:T=1,eps=0.65,steps=1" or "mtax:T=5". Keys: T, eps, steps,
// step_size, random_start, squared, lo, hi, loss.
DistributionSpec parse_generator_spec(const std::string& spec);
std::string format_generator_spec(const DistributionSpec& d);

// Reads the training keys (top level plus [network], [optimizer],
// [multisim], [arcface], [genN]) on top of `base`. Unknown keys in those
// sections are rejected.
TrainConfig train_config_from(const ConfigMap& cfg, TrainConfig base = {});

// [data] section: classes, per_class, dim, center_spread, cluster_sigma,
// overlap ("a:b:fraction;..."), train_fraction, class_disjoint, seed.
SyntheticConfig synthetic_config_from(const ConfigMap& cfg, SyntheticConfig base = {});

// Full echo of a training configuration, for run manifests.
std::string train_config_json(const TrainConfig& c);
std::string synthetic_config_json(const SyntheticConfig& c);

std::vector<std::size_t> parse_size_list(const std::string& s);
std::vector<std::uint64_t> parse_seed_list(const std::string& s);

}  // namespace mdprop
