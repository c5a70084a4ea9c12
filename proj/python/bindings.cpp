#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mdprop/config.hpp"
#include "mdprop/errors.hpp"
#include "mdprop/harness.hpp"
#include "mdprop/metrics.hpp"

namespace py = pybind11;
using namespace mdprop;

namespace {

using FloatArray = py::array_t<Scalar, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-d array, got " + std::to_string(a.ndim()) + " dims");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Tensor::from({r, c}, std::vector<Scalar>(a.data(), a.data() + r * c));
}

std::vector<int> to_labels(const IntArray& a) {
  if (a.ndim() != 1) throw DimensionError("labels must be 1-d");
  return {a.data(), a.data() + a.shape(0)};
}

FloatArray to_numpy(const Tensor& t) {
  FloatArray out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<int> labels_numpy(const std::vector<int>& v) {
  py::array_t<int> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Dataset to_dataset(const FloatArray& x, const IntArray& y) {
  Dataset ds;
  ds.features = to_tensor(x);
  ds.labels = to_labels(y);
  int mx = -1;
  for (int l : ds.labels) mx = std::max(mx, l);
  ds.num_classes = static_cast<std::size_t>(mx + 1);
  ds.provenance = "python";
  ds.validate();
  return ds;
}

// Values may be str, int, float, bool or a list of those.
std::string config_value(const py::handle& v) {
  if (py::isinstance<py::bool_>(v)) return v.cast<bool>() ? "true" : "false";
  if (py::isinstance<py::list>(v) || py::isinstance<py::tuple>(v)) {
    std::string s;
    for (auto item : v) s += (s.empty() ? "" : ",") + config_value(item);
    return s;
  }
  return py::str(v).cast<std::string>();
}

ConfigMap config_map(const py::dict& d, const std::string& prefix = "") {
  ConfigMap c;
  for (auto [k, v] : d) c.set(prefix + k.cast<std::string>(), config_value(v));
  return c;
}

py::dict parse_json(const std::string& s) { return py::module_::import("json").attr("loads")(s); }

}  // namespace

PYBIND11_MODULE(_mdprop, m) {
  m.doc() = "multi-distribution BN metric learning: training, attacks and retrieval metrics";

  static py::exception<Error> base(m, "MdpropError", PyExc_RuntimeError);
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<TargetSelectionError>(m, "TargetSelectionError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<IndexError>(m, "IndexError", PyExc_IndexError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<MultiBNNetwork>(m, "Network")
      .def_property_readonly("k", &MultiBNNetwork::k)
      .def_property_readonly("input_dim", &MultiBNNetwork::input_dim)
      .def_property_readonly("embedding_dim", &MultiBNNetwork::embedding_dim)
      .def(
          "embed",
          [](MultiBNNetwork& net, const FloatArray& x, std::size_t bn_set) {
            NoGradGuard ng;
            return to_numpy(net.forward(to_tensor(x), bn_set, Mode::kEval));
          },
          py::arg("x"), py::arg("bn_set") = 1, "eval-mode embeddings through one BN set")
      .def("save", [](const MultiBNNetwork& net, const std::string& path) { write_checkpoint_file(net, path); })
      .def("to_bytes",
           [](const MultiBNNetwork& net) {
             const auto b = save_checkpoint(net);
             return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
           })
      .def("bn_divergence_csv", [](const MultiBNNetwork& net) { return bn_divergence_csv(bn_divergence(net)); })
      .def("flat_state", &MultiBNNetwork::flat_state);

  m.def("load_network", &read_checkpoint_file, py::arg("path"));

  m.def(
      "make_synthetic",
      [](const py::dict& options) {
        auto [tr, te] = make_synthetic(synthetic_config_from(config_map(options, "data.")));
        py::dict out;
        out["x_train"] = to_numpy(tr.features);
        out["y_train"] = labels_numpy(tr.labels);
        out["x_test"] = to_numpy(te.features);
        out["y_test"] = labels_numpy(te.labels);
        return out;
      },
      py::arg("options") = py::dict());

  m.def(
      "train",
      [](const FloatArray& x, const IntArray& y, const py::dict& config) {
        // "genN" keys take a generator spec string; everything else goes
        // through the usual config reader.
        py::dict plain;
        std::map<std::size_t, std::string> gens;
        for (auto [k, v] : config) {
          const auto key = k.cast<std::string>();
          if (key.size() > 3 && key.rfind("gen", 0) == 0 && key.find('.') == std::string::npos) {
            gens[std::stoul(key.substr(3))] = config_value(v);
          } else {
            plain[k] = v;
          }
        }
        TrainConfig tc = train_config_from(config_map(plain));
        for (auto& [idx, spec] : gens) {
          if (idx < 2) throw ConfigError("generator keys start at gen2");
          if (tc.per_distribution.size() < idx - 1) tc.per_distribution.resize(idx - 1);
          tc.per_distribution[idx - 2] = parse_generator_spec(spec);
        }
        tc.validate();
        const Dataset ds = to_dataset(x, y);
        py::gil_scoped_release release;
        return train(ds, tc).net;
      },
      py::arg("x"), py::arg("y"), py::arg("config") = py::dict());

  m.def(
      "_evaluate",
      [](MultiBNNetwork& net, const FloatArray& x, const IntArray& y, const std::string& attack, double eps, int steps,
         std::size_t targets, std::uint64_t seed, std::vector<std::size_t> ks) {
        EvalOptions o;
        o.ks = std::move(ks);
        o.attack = parse_attack_kind(attack);
        o.attack_config.eps = static_cast<Scalar>(eps);
        o.attack_config.steps = steps;
        o.attack_config.targets = o.attack == AttackKind::kStax ? 1 : targets;
        o.seed = seed;
        return eval_report_json(evaluate(net, to_dataset(x, y), o));
      },
      py::arg("net"), py::arg("x"), py::arg("y"), py::arg("attack") = "none", py::arg("eps") = kDefaultGeneratorEps,
      py::arg("steps") = 20, py::arg("targets") = 5, py::arg("seed") = 0,
      py::arg("ks") = std::vector<std::size_t>{1, 4});

  m.def(
      "recall_at_k",
      [](const FloatArray& e, const IntArray& y, std::size_t k) { return recall_at_k({to_tensor(e), to_labels(y)}, k); },
      py::arg("embeddings"), py::arg("labels"), py::arg("k"));
  m.def(
      "nmi",
      [](const FloatArray& e, const IntArray& y, std::uint64_t seed) { return nmi({to_tensor(e), to_labels(y)}, seed); },
      py::arg("embeddings"), py::arg("labels"), py::arg("seed") = 0);
  m.def(
      "pi_ratio",
      [](const FloatArray& e, const IntArray& y) {
        const auto p = pi_ratio({to_tensor(e), to_labels(y)});
        return py::make_tuple(p.intra, p.inter, p.ratio);
      },
      py::arg("embeddings"), py::arg("labels"), "(intra, inter, ratio)");

  m.def(
      "_run_benchmark",
      [](std::vector<std::uint64_t> seeds, std::size_t steps, std::size_t threads) {
        BenchmarkOptions o;
        o.seeds = std::move(seeds);
        o.steps = steps;
        o.threads = threads;
        BenchmarkResult r;
        {
          py::gil_scoped_release release;
          r = run_benchmark(o);
        }
        return py::make_tuple(r.table_csv(), r.table_text(), r.verdict_json());
      },
      py::arg("seeds"), py::arg("steps"), py::arg("threads") = 0);

  m.def("git_blob_hash", [](const py::bytes& b) {
    const std::string s = b;
    return git_blob_hash({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  });
}
