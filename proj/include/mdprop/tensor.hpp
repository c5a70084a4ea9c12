#pragma once

// Dense row-major tensors with a tape-based reverse-mode differentiation
// engine. Tensors are shared handles: copying a Tensor aliases the same
// storage, use clone() for an independent copy.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mdprop {

#ifdef MDPROP_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Graph;

struct TensorImpl {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  bool is_leaf = true;
  const Graph* graph = nullptr;  // graph holding the op that produced this tensor
};

class Tensor {
 public:
  Tensor();

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, Scalar value);
  static Tensor from(const Shape& shape, std::vector<Scalar> values);
  static Tensor scalar(Scalar value);

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const Scalar> data() const { return impl_->data; }
  std::span<Scalar> mutable_data() { return impl_->data; }
  std::vector<Scalar> to_vector() const { return impl_->data; }
  Scalar item() const;
  Scalar at(std::size_t i) const { return impl_->data[i]; }
  Scalar at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag = true);
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const Scalar> grad() const { return impl_->grad; }
  std::span<Scalar> mutable_grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Independent leaf copy of the values; no graph history, no grad.
  Tensor detach() const;
  // Independent copy preserving requires_grad (but not grad or history).
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_op_result(Shape, std::vector<Scalar>, std::initializer_list<const Tensor*>,
                               std::function<void(class GradSink&, const TensorImpl&,
                                                  std::span<const Scalar>)>);
  std::shared_ptr<TensorImpl> impl_;
};

// Accumulation buffers used by a single backward pass.
class GradSink {
 public:
  using Filter = std::function<bool(const TensorImpl*)>;
  explicit GradSink(Filter leaf_filter) : leaf_filter_(std::move(leaf_filter)) {}

  // Gradient flowing into `t` (empty span if none reached it).
  std::span<const Scalar> incoming(const TensorImpl* t) const;
  // Buffer to add into for `t`; empty span when `t` needs no gradient.
  // Starts at zero for every recorded op; flush() then adds it to the pass
  // total, so a contribution never depends on what already accumulated.
  std::span<Scalar> accum(const std::shared_ptr<TensorImpl>& t);
  void flush();
  void seed(const TensorImpl* t, Scalar value);

  template <typename F>
  void for_each_leaf(F&& fn) const {
    for (const auto& [impl, buf] : buffers_) {
      if (impl->is_leaf) fn(impl, buf);
    }
  }

 private:
  Filter leaf_filter_;
  std::unordered_map<const TensorImpl*, std::vector<Scalar>> buffers_;
  std::vector<std::pair<const TensorImpl*, std::vector<Scalar>>> pending_;
};

// Ordered record of differentiable operations. backward() walks the records
// in exact reverse order of recording.
class Graph {
 public:
  // Called with the sink, the recorded output and the gradient reaching it.
  using BackwardFn = std::function<void(GradSink&, const TensorImpl&, std::span<const Scalar>)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(std::shared_ptr<TensorImpl> out, std::vector<std::shared_ptr<TensorImpl>> inputs,
              BackwardFn fn);
  void reset() { records_.clear(); }
  std::size_t size() const { return records_.size(); }

  void run_backward(const TensorImpl* loss, GradSink& sink) const;

  // Graph that new operations on this thread are recorded into.
  static Graph& current();

 private:
  friend class GraphScope;
  struct Record {
    std::shared_ptr<TensorImpl> out;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn fn;
  };
  std::vector<Record> records_;
};

// Installs a fresh graph as the current one for the lifetime of the scope.
class GraphScope {
 public:
  GraphScope();
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;
  Graph& graph() { return graph_; }

 private:
  Graph graph_;
  Graph* previous_;
};

// Disables recording on this thread for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Tensor make_op_result(Shape shape, std::vector<Scalar> data, std::initializer_list<const Tensor*> inputs,
                      Graph::BackwardFn backward);

// Populates grad buffers of every leaf that requires gradients and is
// reachable from `loss`. Gradients accumulate into existing buffers.
void backward(const Tensor& loss);

// Gradient of `loss` with respect to `wrt` only. No grad buffer is touched.
std::vector<Scalar> gradient(const Tensor& loss, const Tensor& wrt);

// --- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& x, const Tensor& row);  // x[B×D] + row[D]
Tensor scale(const Tensor& x, Scalar factor);
Tensor add_scalar(const Tensor& x, Scalar value);
Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log1p(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor row_sum(const Tensor& x);  // [B×D] → [B]
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor gather(const Tensor& x, std::span<const std::size_t> flat_index);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

inline constexpr Scalar kNormEps = static_cast<Scalar>(1e-12);
Tensor l2_normalize(const Tensor& x);

// Mean softmax cross-entropy of logits[B×C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Replaces the true-class cosine c of each row by cos(acos(c) + margin).
// Cosines are clamped to [-1 + 1e-7, 1 - 1e-7] first.
Tensor arc_margin(const Tensor& cosines, std::span<const int> labels, Scalar margin);

enum class Mode { kTrain, kEval };

// One batch-norm parameter set. All four tensors are handles, so copies of a
// BNParams alias the same state; use clone() for an independent set.
struct BNParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;  // never requires grad
  Tensor running_var;

  static BNParams identity(std::size_t width);
  BNParams clone() const;
  std::size_t width() const { return running_mean.numel(); }
};

inline constexpr Scalar kBatchNormEps = static_cast<Scalar>(1e-5);
inline constexpr Scalar kBatchNormMomentum = static_cast<Scalar>(0.1);

// Train mode normalizes by batch statistics and updates the running
// statistics by EMA (unbiased variance); eval mode uses running statistics
// and mutates nothing.
Tensor batch_norm(const Tensor& x, BNParams& params, Mode mode);

}  // namespace mdprop
