#include "mdprop/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "mdprop/errors.hpp"

namespace mdprop {

std::string git_blob_hash(std::span<const std::uint8_t> bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha1 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

DataBundle load_data(const std::string& spec, const ConfigMap& config) {
  DataBundle out;
  if (spec.rfind("synthetic", 0) == 0) {
    ConfigMap overrides = config;
    if (spec.size() > 9) {
      if (spec[9] != ':') throw ConfigError("data spec '" + spec + "': expected synthetic:key=value,...");
      std::istringstream is(spec.substr(10));
      std::string item;
      while (std::getline(is, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("data spec '" + spec + "': expected key=value, got '" + item + "'");
        overrides.set("data." + item.substr(0, eq), item.substr(eq + 1));
      }
    }
    SyntheticConfig sc = synthetic_config_from(overrides);
    auto [train, test] = make_synthetic(sc);
    out.train = std::move(train);
    out.test = std::move(test);
    if (!sc.overlap_pairs.empty()) out.overlap_classes = {sc.overlap_pairs[0].a, sc.overlap_pairs[0].b};
    out.synthetic = sc;
    return out;
  }
  const std::string path = spec.rfind("csv:", 0) == 0 ? spec.substr(4) : spec;
  bool header = true;
  if (auto h = config.get("data.header")) header = *h == "true" || *h == "1" || *h == "yes";
  LabelColumn column;
  if (auto c = config.get("data.label_column")) {
    const bool numeric = !c->empty() && std::all_of(c->begin(), c->end(), [](char ch) { return ch >= '0' && ch <= '9'; });
    column.which = numeric ? LabelColumn{std::size_t(std::stoul(*c))}.which : LabelColumn{*c}.which;
  } else {
    column.which = header ? LabelColumn{std::string("label")}.which : LabelColumn{}.which;
  }
  out.train = load_csv(path, column, header);
  out.train.validate();
  out.test = out.train;
  out.test.split = Split::kTest;
  return out;
}

AttackKind parse_attack_kind(const std::string& s) {
  if (s == "none") return AttackKind::kNone;
  if (s == "stax") return AttackKind::kStax;
  if (s == "mtax") return AttackKind::kMtax;
  throw ConfigError("unknown attack '" + s + "' (expected none, stax or mtax)");
}

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::kNone: return "none";
    case AttackKind::kStax: return "stax";
    case AttackKind::kMtax: return "mtax";
  }
  return "?";
}

namespace {

std::vector<Scalar> nearest_same_class(const EmbeddingSet& set) {
  const std::size_t m = set.size(), d = set.dim();
  auto E = set.embeddings.data();
  std::vector<Scalar> out(m, Scalar{-1});
  for (std::size_t i = 0; i < m; ++i) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i || set.labels[j] != set.labels[i]) continue;
      best = std::min(best, euclidean(E.subspan(i * d, d), E.subspan(j * d, d)));
    }
    if (std::isfinite(best)) out[i] = best;
  }
  return out;
}

void fill_geometry(EvalReport& r, const EmbeddingSet& set, std::uint64_t seed) {
  r.nmi = nmi(set, seed);
  const auto pi = pi_ratio(set);
  r.pi_intra = pi.intra;
  r.pi_inter = pi.inter;
  r.pi_ratio = pi.ratio;
}

}  // namespace

EvalReport evaluate(const MultiBNNetwork& net, const Dataset& data, const EvalOptions& options) {
  data.validate();
  MultiBNNetwork view = net.inference_view();
  EmbeddingSet clean;
  {
    NoGradGuard no_grad;
    clean = {view.forward(data.features, 1, Mode::kEval), data.labels};
  }

  EvalReport report;
  double tau = 0;
  if (options.overlap_classes.size() >= 2) tau = median_gallery_distance(clean);

  if (options.attack == AttackKind::kNone) {
    for (auto k : options.ks) report.recall_at[k] = recall_at_k(clean, k);
    fill_geometry(report, clean, options.seed);
    if (options.overlap_classes.size() >= 2) {
      report.overlap_count = detect_overlap(clean, options.overlap_classes, tau).indices.size();
    }
    return report;
  }

  AttackConfig ac = options.attack_config;
  if (options.attack == AttackKind::kStax) ac.targets = 1;
  Batch all{data.features, data.labels, {}};
  all.indices.resize(data.size());
  std::iota(all.indices.begin(), all.indices.end(), std::size_t{0});
  std::mt19937_64 rng(options.seed);
  const auto targets = select_targets(all, ac.targets, data, rng);
  const auto gallery = nearest_same_class(clean);
  const AdvBatch adv = options.attack == AttackKind::kStax
                           ? gen_stax(view, 1, data.features, data.labels, targets, ac, gallery)
                           : gen_mtax(view, 1, data.features, data.labels, targets, ac, gallery);
  EmbeddingSet adv_set;
  {
    NoGradGuard no_grad;
    adv_set = {view.forward(adv.x_adv, 1, Mode::kEval), data.labels};
  }
  for (auto k : options.ks) report.recall_at[k] = recall_at_k(adv_set, clean, k, true);
  fill_geometry(report, adv_set, options.seed);
  if (options.overlap_classes.size() >= 2) {
    report.overlap_count = detect_overlap(adv_set, options.overlap_classes, tau).indices.size();
  }
  const auto with_gallery = static_cast<std::size_t>(std::count_if(gallery.begin(), gallery.end(), [](Scalar g) { return g >= 0; }));
  report.attack = AttackContext{to_string(options.attack), double(ac.eps), ac.steps, ac.targets,
                                with_gallery ? double(adv.fooled_count) / double(with_gallery) : 0.0};
  return report;
}

std::vector<MethodSpec> desk_methods(const BenchmarkOptions& options, std::uint64_t seed) {
  TrainConfig base;
  base.steps = options.steps;
  base.batch_size = options.batch_size;
  base.seed = seed;
  base.arch.input_dim = options.data.dim;
  auto gen = [&](GeneratorKind g, std::size_t t) {
    DistributionSpec d;
    d.generator = g;
    d.attack.eps = options.train_eps;
    d.attack.steps = options.train_attack_steps;
    d.attack.targets = t;
    return d;
  };
  std::vector<MethodSpec> out;
  out.push_back({"ST", "-", base});
  TrainConfig at = base;
  at.method = Method::kAT;
  at.per_distribution = {gen(GeneratorKind::kStax, 1)};
  out.push_back({"AT", "1", at});
  TrainConfig ap = base;
  ap.method = Method::kAdvPropD;
  ap.k_distributions = 2;
  ap.per_distribution = {gen(GeneratorKind::kStax, 1)};
  out.push_back({"AP'", "1", ap});
  TrainConfig mp1 = base;
  mp1.method = Method::kMDProp;
  mp1.k_distributions = 2;
  mp1.per_distribution = {gen(GeneratorKind::kMtax, 3)};
  out.push_back({"MP'", "3", mp1});
  TrainConfig mp2 = base;
  mp2.method = Method::kMDProp;
  mp2.k_distributions = 3;
  mp2.per_distribution = {gen(GeneratorKind::kStax, 1), gen(GeneratorKind::kMtax, 5)};
  out.push_back({"MP''", "1,5", mp2});
  return out;
}

namespace {

BenchmarkCell run_cell(const BenchmarkOptions& options, const MethodSpec& method, std::uint64_t seed) {
  SyntheticConfig sc = options.data;
  sc.seed = seed;
  auto [train_set, test_set] = make_synthetic(sc);

  BenchmarkCell cell;
  cell.method = method.name;
  cell.targets_label = method.targets_label;
  cell.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult tr = train(train_set, method.config);
  cell.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  cell.log = std::move(tr.log);
  cell.checkpoint = save_checkpoint(tr.net);
  cell.checkpoint_hash = git_blob_hash(cell.checkpoint);

  EvalOptions eo;
  eo.seed = seed;
  if (!sc.overlap_pairs.empty()) eo.overlap_classes = {sc.overlap_pairs[0].a, sc.overlap_pairs[0].b};
  cell.clean = evaluate(tr.net, test_set, eo);
  cell.overlap_count = cell.clean.overlap_count;
  {
    NoGradGuard no_grad;
    MultiBNNetwork view = tr.net.inference_view();
    cell.tau = median_gallery_distance({view.forward(test_set.features, 1, Mode::kEval), test_set.labels});
  }
  eo.attack_config.eps = options.eval_eps;
  eo.attack_config.steps = options.eval_attack_steps;
  eo.attack = AttackKind::kStax;
  cell.stax = evaluate(tr.net, test_set, eo);
  eo.attack = AttackKind::kMtax;
  eo.attack_config.targets = options.eval_mtax_targets;
  cell.mtax = evaluate(tr.net, test_set, eo);
  if (tr.net.k() >= 2) cell.bn_divergence = bn_divergence(tr.net);
  return cell;
}

struct MeanStd {
  double mean = 0;
  double std = 0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / double(v.size() - 1));
  }
  return r;
}

std::string cell_text(const MeanStd& m, double scale, int precision) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << m.mean * scale << " [± " << m.std * scale << "]";
  return os.str();
}

const char* kConditions[] = {"clean", "stax", "mtax"};
const char* kMetrics[] = {"R@1", "R@4", "NMI", "pi_ratio"};

const EvalReport& condition(const BenchmarkCell& c, int i) { return i == 0 ? c.clean : (i == 1 ? c.stax : c.mtax); }

double metric(const EvalReport& r, int i) {
  switch (i) {
    case 0: return r.recall_at.count(1) ? r.recall_at.at(1) : std::nan("");
    case 1: return r.recall_at.count(4) ? r.recall_at.at(4) : std::nan("");
    case 2: return r.nmi;
    default: return r.pi_ratio;
  }
}

std::vector<std::string> method_order(const BenchmarkResult& r) {
  std::vector<std::string> names;
  for (const auto& c : r.cells)
    if (std::find(names.begin(), names.end(), c.method) == names.end()) names.push_back(c.method);
  return names;
}

std::vector<std::vector<std::string>> table_rows(const BenchmarkResult& r) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"method", "T"};
  for (auto cond : kConditions)
    for (auto m : kMetrics) header.push_back(std::string(cond) + "_" + m);
  rows.push_back(header);
  for (const auto& name : method_order(r)) {
    std::vector<std::string> row{name};
    std::vector<const BenchmarkCell*> cells;
    for (const auto& c : r.cells)
      if (c.method == name) cells.push_back(&c);
    row.push_back(cells.front()->targets_label);
    for (int ci = 0; ci < 3; ++ci) {
      for (int mi = 0; mi < 4; ++mi) {
        std::vector<double> v;
        for (auto* c : cells) v.push_back(metric(condition(*c, ci), mi));
        const bool ratio = mi == 3;
        row.push_back(cell_text(mean_std(v), ratio ? 1.0 : 100.0, ratio ? 3 : 2));
      }
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

std::string BenchmarkResult::table_csv() const {
  // RFC 4180 quoting: the T label of MP'' is "1,5".
  auto field = [](const std::string& f) {
    if (f.find_first_of(",\"\n") == std::string::npos) return f;
    std::string q = "\"";
    for (char ch : f) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  };
  std::ostringstream os;
  for (const auto& row : table_rows(*this)) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << field(row[i]);
    os << '\n';
  }
  return os.str();
}

std::string BenchmarkResult::table_text() const {
  const auto rows = table_rows(*this);
  std::vector<std::size_t> width(rows.front().size(), 0);
  // "±" is two bytes but one column wide
  auto display = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], display(row[i]));
  std::ostringstream os;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << "  ";
      os << row[i] << std::string(width[i] - display(row[i]), ' ');
    }
    os << '\n';
  }
  return os.str();
}

BenchmarkResult run_benchmark(const BenchmarkOptions& options) {
  if (options.seeds.empty()) throw ConfigError("benchmark: need at least one seed");
  options.data.validate();
  struct Job {
    MethodSpec method;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  const auto names = desk_methods(options, 0);
  for (std::size_t m = 0; m < names.size(); ++m)
    for (auto seed : options.seeds) jobs.push_back({desk_methods(options, seed)[m], seed});
  for (const auto& j : jobs) j.method.config.validate();

  BenchmarkResult result;
  result.options = options;
  result.cells.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        result.cells[i] = run_cell(options, jobs[i].method, jobs[i].seed);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  std::size_t threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, jobs.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return result;
}

namespace {

const BenchmarkCell* find_cell(const BenchmarkResult& r, const std::string& method, std::uint64_t seed) {
  for (const auto& c : r.cells)
    if (c.method == method && c.seed == seed) return &c;
  return nullptr;
}

bool majority(std::size_t holding, std::size_t total) { return total > 0 && 3 * holding >= 2 * total; }

}  // namespace

Verdict benchmark_verdict(const BenchmarkResult& r) {
  Verdict v;
  const auto& seeds = r.options.seeds;
  auto clean_r1 = [](const BenchmarkCell& c) { return c.clean.recall_at.at(1); };
  auto stax_r1 = [](const BenchmarkCell& c) { return c.stax.recall_at.at(1); };
  auto seed_mean = [&](const std::string& method, auto f) {
    double s = 0;
    for (auto seed : seeds) s += f(*find_cell(r, method, seed));
    return s / double(seeds.size());
  };

  // Pairwise claim lhs(method a) OP rhs(method b), judged per seed and optionally on the mean.
  auto pairwise = [&](std::string id, std::string desc, const std::string& a, const std::string& b, auto value,
                      auto holds, bool on_mean) {
    Verdict::Claim c{std::move(id), std::move(desc), 0, seeds.size(), std::nullopt, false};
    if (!find_cell(r, a, seeds[0]) || !find_cell(r, b, seeds[0])) return c;
    for (auto seed : seeds) c.seeds_holding += holds(value(*find_cell(r, a, seed)), value(*find_cell(r, b, seed))) ? 1 : 0;
    if (on_mean) c.mean_holds = holds(seed_mean(a, value), seed_mean(b, value));
    c.pass = majority(c.seeds_holding, c.seeds_total) && c.mean_holds.value_or(true);
    return c;
  };
  auto le = [](double x, double y) { return x <= y; };
  auto ge = [](double x, double y) { return x >= y; };

  v.claims.push_back(pairwise("6a", "AT clean R@1 <= ST clean R@1", "AT", "ST", clean_r1, le, true));
  v.claims.push_back(pairwise("6b", "AT adversarial R@1 >= ST adversarial R@1", "AT", "ST", stax_r1, ge, true));
  v.claims.push_back(pairwise("6c", "AP' clean R@1 >= AT clean R@1", "AP'", "AT", clean_r1, ge, true));
  v.claims.push_back(pairwise("6d", "MP'' adversarial R@1 >= 1.2 x ST adversarial R@1", "MP''", "ST", stax_r1,
                              [](double x, double y) { return x >= 1.2 * y; }, false));
  {
    Verdict::Claim c{"6e", "MP' or MP'' clean R@1 >= AT clean R@1", 0, seeds.size(), std::nullopt, false};
    if (find_cell(r, "MP'", seeds[0]) && find_cell(r, "MP''", seeds[0]) && find_cell(r, "AT", seeds[0])) {
      for (auto seed : seeds) {
        const double at = clean_r1(*find_cell(r, "AT", seed));
        c.seeds_holding +=
            std::max(clean_r1(*find_cell(r, "MP'", seed)), clean_r1(*find_cell(r, "MP''", seed))) >= at ? 1 : 0;
      }
      c.mean_holds = std::max(seed_mean("MP'", clean_r1), seed_mean("MP''", clean_r1)) >= seed_mean("AT", clean_r1);
      c.pass = majority(c.seeds_holding, c.seeds_total) && *c.mean_holds;
    }
    v.claims.push_back(c);
  }
  v.claims.push_back(pairwise("7", "MP'' overlap count <= ST overlap count", "MP''", "ST",
                              [](const BenchmarkCell& c) { return double(c.overlap_count); }, le, false));
  {
    Verdict::Claim c{"5", "every auxiliary BN set departs from the clean set (max |dgamma|, |dbeta| > 1e-3)", 0, 0,
                     std::nullopt, false};
    for (const auto& cell : r.cells) {
      if (cell.bn_divergence.empty()) continue;
      std::size_t max_set = 1;
      for (const auto& row : cell.bn_divergence) max_set = std::max(max_set, row.set_b);
      bool all_sets = true;
      for (std::size_t k = 2; k <= max_set; ++k) {
        bool any_layer = false;
        for (const auto& row : cell.bn_divergence)
          if (row.set_a == 1 && row.set_b == k && row.gamma.max_abs > 1e-3 && row.beta.max_abs > 1e-3) any_layer = true;
        all_sets = all_sets && any_layer;
      }
      ++c.seeds_total;
      c.seeds_holding += all_sets ? 1 : 0;
    }
    c.pass = c.seeds_total > 0 && c.seeds_holding == c.seeds_total;
    v.claims.push_back(c);
  }
  return v;
}

std::string BenchmarkResult::verdict_json() const {
  const Verdict v = benchmark_verdict(*this);
  nlohmann::ordered_json j;
  nlohmann::ordered_json claims = nlohmann::ordered_json::array();
  bool all = true;
  for (const auto& c : v.claims) {
    nlohmann::ordered_json e;
    e["id"] = c.id;
    e["claim"] = c.description;
    e["holding"] = c.seeds_holding;
    e["total"] = c.seeds_total;
    e["mean_holds"] = c.mean_holds ? nlohmann::ordered_json(*c.mean_holds) : nlohmann::ordered_json(nullptr);
    e["pass"] = c.pass;
    claims.push_back(e);
    all = all && c.pass;
  }
  j["claims"] = claims;
  j["all_pass"] = all;
  return j.dump(2);
}

}  // namespace mdprop
