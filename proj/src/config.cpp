#include "mdprop/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mdprop/errors.hpp"

namespace mdprop {

std::optional<std::string> ConfigMap::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::set<std::string> ConfigMap::sections() const {
  std::set<std::string> out;
  for (const auto& [k, v] : values_) {
    const auto dot = k.find('.');
    if (dot != std::string::npos) out.insert(k.substr(0, dot));
  }
  return out;
}

void ConfigMap::merge(const ConfigMap& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

void flatten_json(const nlohmann::json& j, const std::string& prefix, ConfigMap& out, const std::string& origin) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    const auto& v = it.value();
    if (v.is_object()) {
      if (!prefix.empty()) throw ConfigError(origin + ": sections nest only one level (at '" + key + "')");
      flatten_json(v, key, out, origin);
    } else if (v.is_string()) {
      out.set(key, v.get<std::string>());
    } else if (v.is_array()) {
      std::string joined;
      for (const auto& e : v) {
        if (!joined.empty()) joined += ',';
        joined += e.is_string() ? e.get<std::string>() : e.dump();
      }
      out.set(key, joined);
    } else if (v.is_null()) {
      continue;
    } else {
      out.set(key, v.dump());
    }
  }
}

}  // namespace

ConfigMap parse_config_text(const std::string& text, const std::string& origin) {
  ConfigMap out;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(origin + ": " + e.what());
    }
    flatten_json(j, "", out, origin);
    return out;
  }

  std::istringstream is(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    // ';' only comments out whole lines since overlap lists use it.
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty() || line.front() == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(line_no) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": missing key");
    out.set(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
  }
  return out;
}

ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

namespace {

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  const char* b = v.data();
  const char* e = v.data() + v.size();
  if (b != e && *b == '+') ++b;
  auto [ptr, ec] = std::from_chars(b, e, out);
  if (ec != std::errc() || ptr != e) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  std::string s = v;
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

// Applies one attack/generator key; returns false if the key is unknown.
bool apply_generator_key(DistributionSpec& d, const std::string& key, const std::string& value,
                         const std::string& where) {
  const std::string k = where + key;
  if (key == "generator") d.generator = parse_generator(value);
  else if (key == "T" || key == "targets") d.attack.targets = to_uint(k, value);
  else if (key == "eps") d.attack.eps = static_cast<Scalar>(to_double(k, value));
  else if (key == "steps") d.attack.steps = static_cast<int>(to_uint(k, value));
  else if (key == "step_size") d.attack.step_size = static_cast<Scalar>(to_double(k, value));
  else if (key == "random_start") d.attack.random_start = to_bool(k, value);
  else if (key == "squared") d.attack.squared = to_bool(k, value);
  else if (key == "lo") d.attack.bounds.lo = static_cast<Scalar>(to_double(k, value));
  else if (key == "hi") d.attack.bounds.hi = static_cast<Scalar>(to_double(k, value));
  else if (key == "loss") d.loss_override = parse_loss(value);
  else return false;
  return true;
}

void reject_unknown(const std::string& where, const std::string& key) {
  throw ConfigError("unknown config key '" + where + key + "'");
}

}  // namespace

DistributionSpec parse_generator_spec(const std::string& spec) {
  DistributionSpec d;
  d.attack.eps = static_cast<Scalar>(kDefaultGeneratorEps);
  const auto colon = spec.find(':');
  d.generator = parse_generator(trim(spec.substr(0, colon)));
  if (colon != std::string::npos) {
    std::istringstream is(spec.substr(colon + 1));
    std::string item;
    while (std::getline(is, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("generator spec '" + spec + "': expected key=value, got '" + item + "'");
      const auto key = trim(item.substr(0, eq));
      if (!apply_generator_key(d, key, trim(item.substr(eq + 1)), "generator.")) reject_unknown("generator.", key);
    }
  }
  return d;
}

std::string format_generator_spec(const DistributionSpec& d) {
  std::ostringstream os;
  os << to_string(d.generator) << ":T=" << d.attack.targets << ",eps=" << d.attack.eps << ",steps=" << d.attack.steps;
  if (d.attack.step_size) os << ",step_size=" << *d.attack.step_size;
  if (d.attack.random_start) os << ",random_start=true";
  if (!d.attack.squared) os << ",squared=false";
  if (d.loss_override) os << ",loss=" << to_string(*d.loss_override);
  return os.str();
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_uint("list", item));
  }
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (auto v : parse_size_list(s)) out.push_back(v);
  if (out.empty()) throw ConfigError("seed list is empty");
  return out;
}

TrainConfig train_config_from(const ConfigMap& cfg, TrainConfig base) {
  TrainConfig c = std::move(base);
  std::map<std::size_t, DistributionSpec> gens;
  for (const auto& [full, value] : cfg.values()) {
    const auto dot = full.find('.');
    const std::string section = dot == std::string::npos ? "" : full.substr(0, dot);
    const std::string key = dot == std::string::npos ? full : full.substr(dot + 1);
    if (section.empty()) {
      if (key == "method") c.method = parse_method(value);
      else if (key == "k" || key == "k_distributions") c.k_distributions = to_uint(key, value);
      else if (key == "steps") c.steps = to_uint(key, value);
      else if (key == "batch_size") c.batch_size = to_uint(key, value);
      else if (key == "loss") c.loss = parse_loss(value);
      else if (key == "seed") c.seed = to_uint(key, value);
      else if (key == "bn_noise_sigma") c.bn_noise_sigma = static_cast<Scalar>(to_double(key, value));
      else if (key == "eval_every") c.eval_every = to_uint(key, value);
      else if (key == "pretrained") c.pretrained_checkpoint = value;
      else reject_unknown("", key);
    } else if (section == "network") {
      if (key == "hidden") c.arch.hidden = parse_size_list(value);
      else if (key == "embedding_dim") c.arch.embedding_dim = to_uint(full, value);
      else if (key == "input_dim") c.arch.input_dim = to_uint(full, value);
      else reject_unknown("network.", key);
    } else if (section == "optimizer") {
      if (key == "lr") c.adam.lr = static_cast<Scalar>(to_double(full, value));
      else if (key == "beta1") c.adam.beta1 = static_cast<Scalar>(to_double(full, value));
      else if (key == "beta2") c.adam.beta2 = static_cast<Scalar>(to_double(full, value));
      else if (key == "eps") c.adam.eps = static_cast<Scalar>(to_double(full, value));
      else if (key == "weight_decay") c.adam.weight_decay = static_cast<Scalar>(to_double(full, value));
      else reject_unknown("optimizer.", key);
    } else if (section == "multisim") {
      if (key == "alpha") c.multisim.alpha = static_cast<Scalar>(to_double(full, value));
      else if (key == "beta") c.multisim.beta = static_cast<Scalar>(to_double(full, value));
      else if (key == "lambda") c.multisim.lambda = static_cast<Scalar>(to_double(full, value));
      else if (key == "margin" || key == "eps") c.multisim.margin_eps = static_cast<Scalar>(to_double(full, value));
      else if (key == "mining") {
        if (value == "standard") c.multisim.mining = MiningRule::kStandard;
        else if (value == "literal") c.multisim.mining = MiningRule::kLiteral;
        else throw ConfigError(full + ": expected standard or literal, got '" + value + "'");
      } else reject_unknown("multisim.", key);
    } else if (section == "arcface") {
      if (key == "margin") c.arcface.margin = static_cast<Scalar>(to_double(full, value));
      else if (key == "scale") c.arcface.scale = static_cast<Scalar>(to_double(full, value));
      else if (key == "center_lr") c.arcface.center_lr = static_cast<Scalar>(to_double(full, value));
      else reject_unknown("arcface.", key);
    } else if (section.rfind("gen", 0) == 0 && section.size() > 3) {
      const auto idx = to_uint(section, section.substr(3));
      if (idx < 2) throw ConfigError("generator sections start at [gen2], got [" + section + "]");
      auto [it, fresh] = gens.try_emplace(idx);
      if (fresh) it->second.attack.eps = static_cast<Scalar>(kDefaultGeneratorEps);
      if (!apply_generator_key(it->second, key, value, section + ".")) reject_unknown(section + ".", key);
    }
    // Other sections ([data], [eval], ...) belong to other readers.
  }
  if (!gens.empty()) {
    c.per_distribution.clear();
    std::size_t expect = 2;
    for (auto& [idx, d] : gens) {
      if (idx != expect) throw ConfigError("generator sections must be consecutive from [gen2]; missing [gen" + std::to_string(expect) + "]");
      c.per_distribution.push_back(d);
      ++expect;
    }
  }
  return c;
}

SyntheticConfig synthetic_config_from(const ConfigMap& cfg, SyntheticConfig base) {
  SyntheticConfig s = std::move(base);
  for (const auto& [full, value] : cfg.values()) {
    if (full.rfind("data.", 0) != 0) continue;
    const auto key = full.substr(5);
    if (key == "classes") s.classes = to_uint(full, value);
    else if (key == "per_class") s.per_class = to_uint(full, value);
    else if (key == "dim") s.dim = to_uint(full, value);
    else if (key == "center_spread") s.center_spread = to_double(full, value);
    else if (key == "cluster_sigma") s.cluster_sigma = to_double(full, value);
    else if (key == "train_fraction") s.train_fraction = to_double(full, value);
    else if (key == "class_disjoint") s.class_disjoint = to_bool(full, value);
    else if (key == "seed") s.seed = to_uint(full, value);
    else if (key == "overlap") {
      s.overlap_pairs.clear();
      std::istringstream is(value);
      std::string item;
      while (std::getline(is, item, ';')) {
        item = trim(item);
        if (item.empty() || item == "none") continue;
        std::istringstream ps(item);
        std::string a, b, f;
        if (!std::getline(ps, a, ':') || !std::getline(ps, b, ':') || !std::getline(ps, f)) {
          throw ConfigError(full + ": expected a:b:fraction, got '" + item + "'");
        }
        s.overlap_pairs.push_back({static_cast<int>(to_uint(full, trim(a))), static_cast<int>(to_uint(full, trim(b))),
                                   to_double(full, trim(f))});
      }
    } else if (key == "source" || key == "train" || key == "test" || key == "label_column" || key == "header") {
      continue;  // file-backed data keys, read by the harness
    } else {
      reject_unknown("data.", key);
    }
  }
  return s;
}

namespace {

nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["method"] = to_string(c.method);
  j["k"] = c.k_distributions;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["loss"] = to_string(c.loss);
  j["seed"] = c.seed;
  j["bn_noise_sigma"] = c.bn_noise_sigma;
  j["eval_every"] = c.eval_every;
  if (c.pretrained_checkpoint) j["pretrained"] = *c.pretrained_checkpoint;
  j["network"] = {{"input_dim", c.arch.input_dim}, {"hidden", c.arch.hidden}, {"embedding_dim", c.arch.embedding_dim}};
  j["optimizer"] = {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps},
                    {"weight_decay", c.adam.weight_decay}};
  j["multisim"] = {{"alpha", c.multisim.alpha}, {"beta", c.multisim.beta}, {"lambda", c.multisim.lambda},
                   {"margin", c.multisim.margin_eps},
                   {"mining", c.multisim.mining == MiningRule::kStandard ? "standard" : "literal"}};
  j["arcface"] = {{"margin", c.arcface.margin}, {"scale", c.arcface.scale}, {"center_lr", c.arcface.center_lr}};
  for (std::size_t i = 0; i < c.per_distribution.size(); ++i) {
    j["gen" + std::to_string(i + 2)] = format_generator_spec(c.per_distribution[i]);
  }
  return j;
}

}  // namespace

std::string train_config_json(const TrainConfig& c) { return train_config_to_json(c).dump(2); }

std::string synthetic_config_json(const SyntheticConfig& c) {
  nlohmann::ordered_json j;
  j["classes"] = c.classes;
  j["per_class"] = c.per_class;
  j["dim"] = c.dim;
  j["center_spread"] = c.center_spread;
  j["cluster_sigma"] = c.cluster_sigma;
  std::string overlap;
  for (const auto& p : c.overlap_pairs) {
    if (!overlap.empty()) overlap += ';';
    overlap += std::to_string(p.a) + ":" + std::to_string(p.b) + ":" + nlohmann::json(p.fraction).dump();
  }
  j["overlap"] = overlap;
  j["train_fraction"] = c.train_fraction;
  j["class_disjoint"] = c.class_disjoint;
  j["seed"] = c.seed;
  return j.dump(2);
}

}  // namespace mdprop
