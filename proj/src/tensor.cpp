#include "mdprop/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mdprop/errors.hpp"

namespace mdprop {

namespace {

thread_local Graph* tls_current_graph = nullptr;
thread_local bool tls_grad_enabled = true;

Graph& thread_default_graph() {
  thread_local Graph graph;
  return graph;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Elementwise op whose derivative is a function of (input, output).
template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<Scalar> out(x.numel());
  auto xs = x.data();
  std::transform(xs.begin(), xs.end(), out.begin(), f);
  auto xi = x.impl();
  return make_op_result(x.shape(), std::move(out), {&x},
                        [xi, df](GradSink& sink, const TensorImpl& o, std::span<const Scalar> g) {
                          auto dx = sink.accum(xi);
                          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * df(xi->data[i], o.data[i]);
                        });
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// --- Tensor ----------------------------------------------------------------

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) {}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, Scalar{0}); }

Tensor Tensor::full(const Shape& shape, Scalar value) {
  return from(shape, std::vector<Scalar>(shape_numel(shape), value));
}

Tensor Tensor::from(const Shape& shape, std::vector<Scalar> values) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Scalar value) { return from({1}, {value}); }

std::size_t Tensor::rows() const { return impl_->shape.empty() ? 0 : impl_->shape[0]; }

std::size_t Tensor::cols() const { return impl_->shape.size() < 2 ? 1 : impl_->shape[1]; }

Scalar Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Scalar Tensor::at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

Tensor Tensor::detach() const { return from(shape(), impl_->data); }

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

// --- graph -----------------------------------------------------------------

std::span<const Scalar> GradSink::incoming(const TensorImpl* t) const {
  auto it = buffers_.find(t);
  if (it == buffers_.end()) return {};
  return it->second;
}

std::span<Scalar> GradSink::accum(const std::shared_ptr<TensorImpl>& t) {
  if (!t->requires_grad) return {};
  if (t->is_leaf && !leaf_filter_(t.get())) return {};
  for (auto& [impl, buf] : pending_)
    if (impl == t.get()) return buf;
  pending_.emplace_back(t.get(), std::vector<Scalar>(t->data.size(), Scalar{0}));
  return pending_.back().second;
}

void GradSink::flush() {
  for (auto& [impl, part] : pending_) {
    auto& buf = buffers_[impl];
    if (buf.empty()) {
      buf = std::move(part);
    } else {
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += part[i];
    }
  }
  pending_.clear();
}

void GradSink::seed(const TensorImpl* t, Scalar value) { buffers_[t].assign(t->data.size(), value); }

void Graph::record(std::shared_ptr<TensorImpl> out, std::vector<std::shared_ptr<TensorImpl>> inputs,
                   BackwardFn fn) {
  out->graph = this;
  records_.push_back(Record{std::move(out), std::move(inputs), std::move(fn)});
}

void Graph::run_backward(const TensorImpl* loss, GradSink& sink) const {
  auto it = std::find_if(records_.rbegin(), records_.rend(),
                         [loss](const Record& r) { return r.out.get() == loss; });
  for (; it != records_.rend(); ++it) {
    auto g = sink.incoming(it->out.get());
    if (g.empty()) continue;
    // The closure may grow the sink's map, so hand it a stable copy.
    std::vector<Scalar> grad_out(g.begin(), g.end());
    it->fn(sink, *it->out, grad_out);
    sink.flush();
  }
}

Graph& Graph::current() { return tls_current_graph ? *tls_current_graph : thread_default_graph(); }

GraphScope::GraphScope() : previous_(tls_current_graph) { tls_current_graph = &graph_; }

GraphScope::~GraphScope() { tls_current_graph = previous_; }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

bool grad_enabled() { return tls_grad_enabled; }

Tensor make_op_result(Shape shape, std::vector<Scalar> data, std::initializer_list<const Tensor*> inputs,
                      Graph::BackwardFn backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs = false;
  if (tls_grad_enabled && backward_fn) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    impl->requires_grad = true;
    impl->is_leaf = false;
    std::vector<std::shared_ptr<TensorImpl>> in;
    in.reserve(inputs.size());
    for (const Tensor* t : inputs) in.push_back(t->impl());
    Graph::current().record(impl, std::move(in), std::move(backward_fn));
  }
  return Tensor(std::move(impl));
}

namespace {

void check_scalar_loss(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
}

}  // namespace

void backward(const Tensor& loss) {
  check_scalar_loss(loss);
  auto* li = loss.impl().get();
  if (li->is_leaf) {
    if (li->requires_grad) {
      if (li->grad.empty()) li->grad.assign(1, Scalar{0});
      li->grad[0] += Scalar{1};
    }
    return;
  }
  GradSink sink([](const TensorImpl*) { return true; });
  sink.seed(li, Scalar{1});
  li->graph->run_backward(li, sink);
  sink.for_each_leaf([](const TensorImpl* leaf, const std::vector<Scalar>& g) {
    auto* mut = const_cast<TensorImpl*>(leaf);
    if (mut->grad.empty()) mut->grad.assign(g.size(), Scalar{0});
    for (std::size_t i = 0; i < g.size(); ++i) mut->grad[i] += g[i];
  });
}

std::vector<Scalar> gradient(const Tensor& loss, const Tensor& wrt) {
  check_scalar_loss(loss);
  const TensorImpl* target = wrt.impl().get();
  auto* li = loss.impl().get();
  if (li == target) return std::vector<Scalar>(1, Scalar{1});
  std::vector<Scalar> out(wrt.numel(), Scalar{0});
  if (li->is_leaf) return out;
  GradSink sink([target](const TensorImpl* t) { return t == target; });
  sink.seed(li, Scalar{1});
  li->graph->run_backward(li, sink);
  auto g = sink.incoming(target);
  std::copy(g.begin(), g.end(), out.begin());
  return out;
}

// --- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  std::vector<Scalar> c(m * n, Scalar{0});
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* crow = &c[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar aip = A[i * k + p];
      const Scalar* brow = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  auto ai = a.impl(), bi = b.impl();
  return make_op_result({m, n}, std::move(c), {&a, &b},
                        [ai, bi, m, k, n](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
                          // dA = dC · Bᵀ
                          if (auto da = sink.accum(ai); !da.empty()) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                Scalar acc = 0;
                                for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bi->data[p * n + j];
                                da[i * k + p] += acc;
                              }
                          }
                          // dB = Aᵀ · dC
                          if (auto db = sink.accum(bi); !db.empty()) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                const Scalar aip = ai->data[i * k + p];
                                for (std::size_t j = 0; j < n; ++j) db[p * n + j] += aip * g[i * n + j];
                              }
                          }
                        });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Scalar> out(m * n);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  auto ai = a.impl();
  return make_op_result({n, m}, std::move(out), {&a},
                        [ai, m, n](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
                          auto da = sink.accum(ai);
                          if (da.empty()) return;
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
                        });
}

namespace {

template <typename Combine>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Combine combine, Scalar sign_b,
              bool product) {
  require_same_shape(a, b, name);
  std::vector<Scalar> out(a.numel());
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = combine(A[i], B[i]);
  auto ai = a.impl(), bi = b.impl();
  return make_op_result(a.shape(), std::move(out), {&a, &b},
                        [ai, bi, sign_b, product](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
                          if (auto da = sink.accum(ai); !da.empty()) {
                            for (std::size_t i = 0; i < da.size(); ++i)
                              da[i] += product ? g[i] * bi->data[i] : g[i];
                          }
                          if (auto db = sink.accum(bi); !db.empty()) {
                            for (std::size_t i = 0; i < db.size(); ++i)
                              db[i] += product ? g[i] * ai->data[i] : sign_b * g[i];
                          }
                        });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", std::plus<Scalar>(), Scalar{1}, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", std::minus<Scalar>(), Scalar{-1}, false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", std::multiplies<Scalar>(), Scalar{1}, true);
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_matrix(x, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (row.numel() != n) {
    throw DimensionError("add_row: row of shape " + shape_str(row.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  auto R = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += R[j];
  auto xi = x.impl(), ri = row.impl();
  return make_op_result(x.shape(), std::move(out), {&x, &row},
                        [xi, ri, m, n](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
                          if (auto dx = sink.accum(xi); !dx.empty()) {
                            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
                          }
                          if (auto dr = sink.accum(ri); !dr.empty()) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) dr[j] += g[i * n + j];
                          }
                        });
}

Tensor scale(const Tensor& x, Scalar factor) {
  return unary(
      x, [factor](Scalar v) { return v * factor; }, [factor](Scalar, Scalar) { return factor; });
}

Tensor add_scalar(const Tensor& x, Scalar value) {
  return unary(
      x, [value](Scalar v) { return v + value; }, [](Scalar, Scalar) { return Scalar{1}; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return v > 0 ? v : Scalar{0}; },
      [](Scalar in, Scalar) { return in > 0 ? Scalar{1} : Scalar{0}; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return v * v; }, [](Scalar in, Scalar) { return 2 * in; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar out) { return out; });
}

Tensor log1p(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return std::log1p(v); }, [](Scalar in, Scalar) { return Scalar{1} / (Scalar{1} + in); });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return std::sqrt(v); },
      [](Scalar, Scalar out) { return out > 0 ? Scalar{0.5} / out : Scalar{0}; });
}

Tensor row_sum(const Tensor& x) {
  require_matrix(x, "row_sum");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<Scalar> out(m);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += X[i * n + j];
    out[i] = static_cast<Scalar>(acc);
  }
  auto xi = x.impl();
  return make_op_result({m}, std::move(out), {&x},
                        [xi, m, n](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
                          auto dx = sink.accum(xi);
                          if (dx.empty()) return;
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[i];
                        });
}

Tensor sum(const Tensor& x) {
  double acc = 0;
  for (Scalar v : x.data()) acc += v;
  auto xi = x.impl();
  return make_op_result({1}, {static_cast<Scalar>(acc)}, {&x},
                        [xi](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
                          auto dx = sink.accum(xi);
                          for (auto& d : dx) d += g[0];
                        });
}

Tensor mean(const Tensor& x) { return scale(sum(x), Scalar{1} / static_cast<Scalar>(x.numel())); }

Tensor gather(const Tensor& x, std::span<const std::size_t> flat_index) {
  if (flat_index.empty()) throw DimensionError("gather: empty index list");
  std::vector<Scalar> out(flat_index.size());
  auto X = x.data();
  for (std::size_t i = 0; i < flat_index.size(); ++i) {
    if (flat_index[i] >= X.size()) {
      throw IndexError("gather: index " + std::to_string(flat_index[i]) + " out of range for " +
                       shape_str(x.shape()));
    }
    out[i] = X[flat_index[i]];
  }
  auto xi = x.impl();
  std::vector<std::size_t> idx(flat_index.begin(), flat_index.end());
  return make_op_result({idx.size()}, std::move(out), {&x},
                        [xi, idx](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
                          auto dx = sink.accum(xi);
                          if (dx.empty()) return;
                          for (std::size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += g[i];
                        });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  const std::size_t n = x.cols();
  std::vector<Scalar> out(rows.size() * n);
  auto X = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                       shape_str(x.shape()));
    }
    std::copy_n(&X[rows[i] * n], n, &out[i * n]);
  }
  auto xi = x.impl();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_op_result({idx.size(), n}, std::move(out), {&x},
                        [xi, idx, n](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
                          auto dx = sink.accum(xi);
                          if (dx.empty()) return;
                          for (std::size_t i = 0; i < idx.size(); ++i)
                            for (std::size_t j = 0; j < n; ++j) dx[idx[i] * n + j] += g[i * n + j];
                        });
}

Tensor l2_normalize(const Tensor& x) {
  require_matrix(x, "l2_normalize");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<Scalar> out(m * n);
  std::vector<Scalar> norms(m);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += double(X[i * n + j]) * X[i * n + j];
    norms[i] = static_cast<Scalar>(std::sqrt(ss));
    const Scalar denom = std::max(norms[i], kNormEps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] / denom;
  }
  auto xi = x.impl();
  return make_op_result(x.shape(), std::move(out), {&x},
                        [xi, norms, m, n](GradSink& sink, const TensorImpl& o, std::span<const Scalar> g) {
                          auto dx = sink.accum(xi);
                          if (dx.empty()) return;
                          for (std::size_t i = 0; i < m; ++i) {
                            if (norms[i] <= kNormEps) {
                              for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[i * n + j] / kNormEps;
                              continue;
                            }
                            double dot = 0;
                            for (std::size_t j = 0; j < n; ++j) dot += double(o.data[i * n + j]) * g[i * n + j];
                            for (std::size_t j = 0; j < n; ++j) {
                              dx[i * n + j] += static_cast<Scalar>((g[i * n + j] - o.data[i * n + j] * dot) / norms[i]);
                            }
                          }
                        });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.rows(), c = logits.cols();
  if (labels.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()));
  }
  auto L = logits.data();
  std::vector<Scalar> probs(m * c);
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(c) + ")");
    }
    const Scalar mx = *std::max_element(&L[i * c], &L[i * c] + c);
    double z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(double(L[i * c + j]) - mx);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = static_cast<Scalar>(std::exp(double(L[i * c + j]) - mx) / z);
    total += -(double(L[i * c + labels[i]]) - mx - std::log(z));
  }
  auto li = logits.impl();
  std::vector<int> lab(labels.begin(), labels.end());
  return make_op_result({1}, {static_cast<Scalar>(total / double(m))}, {&logits},
                        [li, lab, probs, m, c](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
                          auto dl = sink.accum(li);
                          if (dl.empty()) return;
                          const Scalar w = g[0] / static_cast<Scalar>(m);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < c; ++j) {
                              const Scalar onehot = static_cast<std::size_t>(lab[i]) == j ? Scalar{1} : Scalar{0};
                              dl[i * c + j] += w * (probs[i * c + j] - onehot);
                            }
                        });
}

Tensor arc_margin(const Tensor& cosines, std::span<const int> labels, Scalar margin) {
  require_matrix(cosines, "arc_margin");
  const std::size_t m = cosines.rows(), c = cosines.cols();
  if (labels.size() != m) throw DimensionError("arc_margin: label count does not match rows");
  constexpr double kLimit = 1.0 - 1e-7;
  std::vector<Scalar> out(cosines.data().begin(), cosines.data().end());
  std::vector<Scalar> deriv(m, Scalar{0});
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw IndexError("arc_margin: label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(c) + ")");
    }
    const std::size_t at = i * c + labels[i];
    const double raw = out[at];
    const double cl = std::clamp(raw, -kLimit, kLimit);
    const double theta = std::acos(cl);
    out[at] = static_cast<Scalar>(std::cos(theta + margin));
    deriv[i] = (raw == cl) ? static_cast<Scalar>(std::sin(theta + margin) / std::sqrt(1.0 - cl * cl)) : Scalar{0};
  }
  auto ci = cosines.impl();
  std::vector<int> lab(labels.begin(), labels.end());
  return make_op_result(cosines.shape(), std::move(out), {&cosines},
                        [ci, lab, deriv, m, c](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
                          auto dc = sink.accum(ci);
                          if (dc.empty()) return;
                          for (std::size_t i = 0; i < dc.size(); ++i) dc[i] += g[i];
                          for (std::size_t i = 0; i < m; ++i) {
                            const std::size_t at = i * c + lab[i];
                            dc[at] += g[at] * (deriv[i] - Scalar{1});
                          }
                        });
}

BNParams BNParams::identity(std::size_t width) {
  BNParams p;
  p.gamma = Tensor::full({width}, Scalar{1}).set_requires_grad();
  p.beta = Tensor::zeros({width}).set_requires_grad();
  p.running_mean = Tensor::zeros({width});
  p.running_var = Tensor::full({width}, Scalar{1});
  return p;
}

BNParams BNParams::clone() const {
  return BNParams{gamma.clone(), beta.clone(), running_mean.clone(), running_var.clone()};
}

Tensor batch_norm(const Tensor& x, BNParams& params, Mode mode) {
  require_matrix(x, "batch_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (params.width() != n || params.gamma.numel() != n || params.beta.numel() != n) {
    throw DimensionError("batch_norm: parameters of width " + std::to_string(params.width()) +
                         " applied to " + shape_str(x.shape()));
  }
  if (mode == Mode::kTrain && m < 2) {
    throw DimensionError("batch_norm: degenerate batch of size " + std::to_string(m) +
                         " in train mode (need at least 2)");
  }
  auto X = x.data();
  auto G = params.gamma.data();
  auto Bt = params.beta.data();
  auto rmean = params.running_mean.mutable_data();
  auto rvar = params.running_var.mutable_data();
  std::vector<Scalar> inv_std(n);
  std::vector<Scalar> xhat(m * n);
  std::vector<Scalar> out(m * n);
  for (std::size_t j = 0; j < n; ++j) {
    double mu, var;
    if (mode == Mode::kTrain) {
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) s += X[i * n + j];
      mu = s / double(m);
      double ss = 0;
      for (std::size_t i = 0; i < m; ++i) ss += (X[i * n + j] - mu) * (X[i * n + j] - mu);
      var = ss / double(m);
      const double unbiased = ss / double(m - 1);
      rmean[j] = static_cast<Scalar>((1.0 - kBatchNormMomentum) * rmean[j] + kBatchNormMomentum * mu);
      rvar[j] = static_cast<Scalar>((1.0 - kBatchNormMomentum) * rvar[j] + kBatchNormMomentum * unbiased);
    } else {
      mu = rmean[j];
      var = rvar[j];
    }
    const double is = 1.0 / std::sqrt(var + kBatchNormEps);
    inv_std[j] = static_cast<Scalar>(is);
    for (std::size_t i = 0; i < m; ++i) {
      xhat[i * n + j] = static_cast<Scalar>((X[i * n + j] - mu) * is);
      out[i * n + j] = G[j] * xhat[i * n + j] + Bt[j];
    }
  }
  auto xi = x.impl(), gi = params.gamma.impl(), bi = params.beta.impl();
  const bool train = mode == Mode::kTrain;
  return make_op_result(
      x.shape(), std::move(out), {&x, &params.gamma, &params.beta},
      [xi, gi, bi, xhat, inv_std, m, n, train](GradSink& sink, const TensorImpl&, std::span<const Scalar> g) {
        std::vector<double> sum_g(n, 0.0), sum_gx(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            sum_g[j] += g[i * n + j];
            sum_gx[j] += double(g[i * n + j]) * xhat[i * n + j];
          }
        if (auto dg = sink.accum(gi); !dg.empty()) {
          for (std::size_t j = 0; j < n; ++j) dg[j] += static_cast<Scalar>(sum_gx[j]);
        }
        if (auto db = sink.accum(bi); !db.empty()) {
          for (std::size_t j = 0; j < n; ++j) db[j] += static_cast<Scalar>(sum_g[j]);
        }
        auto dx = sink.accum(xi);
        if (dx.empty()) return;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double scale = double(gi->data[j]) * inv_std[j];
            if (train) {
              dx[i * n + j] += static_cast<Scalar>(scale / double(m) *
                                                   (double(m) * g[i * n + j] - sum_g[j] - xhat[i * n + j] * sum_gx[j]));
            } else {
              dx[i * n + j] += static_cast<Scalar>(scale * g[i * n + j]);
            }
          }
      });
}

}  // namespace mdprop
