#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// Every op returns a fresh Tensor; when any operand requires a gradient (and
// gradient recording is enabled) the result remembers its operands and a
// closure that propagates the upstream gradient. `backward()` on a scalar
// visits the recorded graph once in reverse topological order and then
// releases it, so a graph can be differentiated exactly once.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace msn {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Live and high-water bytes of tensor storage (values and gradients).
struct MemoryStats {
  std::size_t live_bytes = 0;
  std::size_t peak_bytes = 0;
};
MemoryStats memory_stats();
void reset_peak_memory();

namespace detail {
struct Node;
}

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const;

  std::span<const double> values() const;
  // Direct write access; only valid on graph leaves (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // New leaf holding a copy of the values, outside any graph.
  Tensor detach() const;
  // Deep copy preserving requires_grad (as a leaf).
  Tensor clone() const;

  void backward() const;

  const void* identity() const { return node_.get(); }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

enum class Mode { Train, Eval };

struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t features) : mean(features, 0.0), var(features, 1.0) {}
};

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] * weight[in, out] (+ bias[out]).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());
// Batched product over the leading axis: a[G, m, k] * b[G, k, n], or b[G, n, k]^T.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// ---- normalisation / activations ----
// softmax(x / temperature) over the last axis.
Tensor softmax(const Tensor& x, double temperature = 1.0);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
// x[B, d]; Train normalises by batch statistics (biased variance) and updates
// `stats` with unbiased variance; Eval normalises with `stats`.
Tensor batch_norm_1d(const Tensor& x, const Tensor& gain, const Tensor& bias, BatchNormStats& stats,
                     Mode mode, double momentum = 0.1, double eps = 1e-5);
Tensor gelu(const Tensor& x);
// Unit vectors along the last axis; rows with norm < 1e-12 map to zero with zero gradient.
Tensor l2_normalize(const Tensor& x);

// ---- elementwise ----
// Equal shapes, or b's shape a suffix of a's (broadcast over leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// log(x + eps).
Tensor log(const Tensor& x, double eps = 0.0);
Tensor exp(const Tensor& x);
// -sum p log p over the last axis, with 0 log 0 = 0.
Tensor entropy(const Tensor& p);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);

// ---- structure ----
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
// Rows of table[P, d] selected by index -> [n, d].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);
// Stacks `count` copies of x along a new leading axis.
Tensor repeat(const Tensor& x, std::size_t count);

}  // namespace msn
