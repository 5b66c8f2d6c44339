#include "msn/tensor.hpp"

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "msn/error.hpp"

namespace msn {

namespace {

std::atomic<std::size_t> g_live_bytes{0};
std::atomic<std::size_t> g_peak_bytes{0};
thread_local bool t_grad_enabled = true;

void track_alloc(std::size_t bytes) {
  const std::size_t now = g_live_bytes.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  std::size_t peak = g_peak_bytes.load(std::memory_order_relaxed);
  while (now > peak && !g_peak_bytes.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
}

void track_free(std::size_t bytes) { g_live_bytes.fetch_sub(bytes, std::memory_order_relaxed); }

#if defined(__GLIBC__)
// Activation buffers are a few MB and churn every op; keep them on the heap
// instead of fresh mmap pages, which cost a page fault per 4 KB on first touch.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Eigen::RowVectorXd>;

}  // namespace

namespace detail {

class Buffer {
 public:
  explicit Buffer(std::size_t n, double fill = 0.0) : values_(n, fill) { track_alloc(bytes()); }
  explicit Buffer(const std::vector<double>& values) : values_(values.begin(), values.end()) { track_alloc(bytes()); }
  ~Buffer() { track_free(bytes()); }
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::size_t size() const { return values_.size(); }

 private:
  std::size_t bytes() const { return values_.size() * sizeof(double); }
  // Eigen's vector kernels peel a scalar prologue up to the first aligned
  // element, so results would otherwise depend on where malloc put the buffer.
  std::vector<double, Eigen::aligned_allocator<double>> values_;
};

struct Node {
  Shape shape;
  std::shared_ptr<Buffer> data;
  std::unique_ptr<Buffer> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::size_t numel() const { return data->size(); }
  const double* v() const { return data->data(); }
  double* g() {
    if (!grad) grad = std::make_unique<Buffer>(data->size(), 0.0);
    return grad->data();
  }
};

}  // namespace detail

using detail::Buffer;
using detail::Node;
using NodePtr = std::shared_ptr<Node>;

// ---------------------------------------------------------------------------
// bookkeeping

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

MemoryStats memory_stats() {
  return {g_live_bytes.load(std::memory_order_relaxed), g_peak_bytes.load(std::memory_order_relaxed)};
}

void reset_peak_memory() { g_peak_bytes.store(g_live_bytes.load(std::memory_order_relaxed)); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_recording_enabled() { return t_grad_enabled; }

namespace {

NodePtr make_leaf(Shape shape, std::shared_ptr<Buffer> data, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

// Builds an op result; the closure is kept only when a gradient must flow.
Tensor make_result(Shape shape, std::shared_ptr<Buffer> data, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  auto node = make_leaf(std::move(shape), std::move(data), false);
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor* t : inputs) needs = needs || (t->defined() && t->requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    node->leaf = false;
    for (const Tensor* t : inputs) node->inputs.push_back(t->defined() ? t->node() : nullptr);
    node->backward = std::move(backward);
  }
  return Tensor(node);
}

Tensor make_result_n(Shape shape, std::shared_ptr<Buffer> data, std::span<const Tensor> inputs,
                     std::function<void(Node&)> backward) {
  auto node = make_leaf(std::move(shape), std::move(data), false);
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->leaf = false;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(node);
}

bool wants(const NodePtr& n) { return n && n->requires_grad; }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw PreconditionError(std::string(op) + ": undefined tensor operand");
}

// Decomposes shape around `axis` into (outer, axis extent, inner).
struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0) throw DimensionError(std::string(op) + ": expected rank >= 1, got scalar");
  return x.shape().back();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("full: zero-sized dimension in " + shape_string(shape));
  }
  const std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::make_shared<Buffer>(n, value), requires_grad));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("from_values: shape " + shape_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " + std::to_string(values.size()));
  }
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("from_values: zero-sized dimension in " + shape_string(shape));
  }
  return Tensor(make_leaf(std::move(shape), std::make_shared<Buffer>(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_values({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->numel(); }

std::span<const double> Tensor::values() const { return {node_->data->data(), node_->data->size()}; }

std::span<double> Tensor::mutable_values() {
  if (!node_->leaf) throw PreconditionError("mutable_values: tensor is not a graph leaf");
  return {node_->data->data(), node_->data->size()};
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  return node_->data->data()[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!node_->leaf) throw PreconditionError("set_requires_grad: only leaves can change requires_grad");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return node_ && node_->grad != nullptr; }

std::span<const double> Tensor::grad() const {
  if (!node_->grad) return {};
  return {node_->grad->data(), node_->grad->size()};
}

std::span<double> Tensor::mutable_grad() { return {node_->g(), node_->numel()}; }

void Tensor::zero_grad() { node_->grad.reset(); }

Tensor Tensor::detach() const {
  std::vector<double> copy(values().begin(), values().end());
  return Tensor(make_leaf(shape(), std::make_shared<Buffer>(std::move(copy)), false));
}

Tensor Tensor::clone() const {
  std::vector<double> copy(values().begin(), values().end());
  return Tensor(make_leaf(shape(), std::make_shared<Buffer>(std::move(copy)), requires_grad()));
}

void Tensor::backward() const {
  if (!node_) throw PreconditionError("backward: undefined tensor");
  if (numel() != 1) throw PreconditionError("backward: loss must be a scalar, got shape " + shape_string(shape()));
  if (node_->consumed) {
    throw PreconditionError("backward: graph already differentiated; rebuild it before calling backward again");
  }
  if (!node_->requires_grad) throw PreconditionError("backward: loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS over interior nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child && child->requires_grad && !child->leaf && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->g()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad) n->backward(*n);
  }
  for (Node* n : order) {
    n->backward = nullptr;
    n->inputs.clear();
    n->consumed = true;
  }
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = std::make_shared<Buffer>(m * n);
  MatMap(out->data(), m, n).noalias() = ConstMatMap(a.values().data(), m, k) * ConstMatMap(b.values().data(), k, n);
  return make_result({m, n}, out, {&a, &b}, [m, k, n](Node& self) {
    ConstMatMap g(self.grad->data(), m, n);
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    if (wants(A)) MatMap(A->g(), m, k).noalias() += g * ConstMatMap(B->v(), k, n).transpose();
    if (wants(B)) MatMap(B->g(), k, n).noalias() += ConstMatMap(A->v(), m, k).transpose() * g;
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  const std::size_t in = last_dim(x, "linear");
  if (weight.rank() != 2 || weight.dim(0) != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t outd = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outd)) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  auto out = std::make_shared<Buffer>(rows * outd);
  MatMap y(out->data(), rows, outd);
  y.noalias() = ConstMatMap(x.values().data(), rows, in) * ConstMatMap(weight.values().data(), in, outd);
  if (bias.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), outd);
  Shape shape = x.shape();
  shape.back() = outd;
  return make_result(std::move(shape), out, {&x, &weight, &bias}, [rows, in, outd](Node& self) {
    ConstMatMap g(self.grad->data(), rows, outd);
    auto& X = self.inputs[0];
    auto& W = self.inputs[1];
    auto& b = self.inputs[2];
    if (wants(X)) MatMap(X->g(), rows, in).noalias() += g * ConstMatMap(W->v(), in, outd).transpose();
    if (wants(W)) MatMap(W->g(), in, outd).noalias() += ConstMatMap(X->v(), rows, in).transpose() * g;
    if (wants(b)) VecMap(b->g(), outd) += g.colwise().sum();
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_defined(a, "bmm");
  require_defined(b, "bmm");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    throw DimensionError("bmm: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                         (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t G = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  auto out = std::make_shared<Buffer>(G * m * n);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  for (std::size_t g = 0; g < G; ++g) {
    MatMap y(out->data() + g * m * n, m, n);
    ConstMatMap A(pa + g * m * k, m, k);
    if (transpose_b) {
      y.noalias() = A * ConstMatMap(pb + g * n * k, n, k).transpose();
    } else {
      y.noalias() = A * ConstMatMap(pb + g * k * n, k, n);
    }
  }
  return make_result({G, m, n}, out, {&a, &b}, [G, m, k, n, transpose_b](Node& self) {
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    const bool wa = wants(A), wb = wants(B);
    for (std::size_t g = 0; g < G; ++g) {
      ConstMatMap dy(self.grad->data() + g * m * n, m, n);
      ConstMatMap av(A->v() + g * m * k, m, k);
      if (transpose_b) {
        ConstMatMap bv(B->v() + g * n * k, n, k);
        if (wa) MatMap(A->g() + g * m * k, m, k).noalias() += dy * bv;
        if (wb) MatMap(B->g() + g * n * k, n, k).noalias() += dy.transpose() * av;
      } else {
        ConstMatMap bv(B->v() + g * k * n, k, n);
        if (wa) MatMap(A->g() + g * m * k, m, k).noalias() += dy * bv.transpose();
        if (wb) MatMap(B->g() + g * k * n, k, n).noalias() += av.transpose() * dy;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// normalisation / activations

Tensor softmax(const Tensor& x, double temperature) {
  require_defined(x, "softmax");
  if (!(temperature > 0.0)) throw ParameterError("softmax: temperature must be > 0, got " + std::to_string(temperature));
  const std::size_t K = last_dim(x, "softmax");
  const std::size_t rows = x.numel() / K;
  auto out = std::make_shared<Buffer>(x.numel());
  const double* px = x.values().data();
  double* py = out->data();
  const double inv_t = 1.0 / temperature;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * K;
    double* yr = py + r * K;
    const double mx = *std::max_element(xr, xr + K);
    for (std::size_t j = 0; j < K; ++j) yr[j] = (xr[j] - mx) * inv_t;
  }
  Eigen::Map<Eigen::ArrayXd> all(py, static_cast<Eigen::Index>(rows * K));
  all = all.exp();
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = py + r * K;
    double total = 0.0;
    for (std::size_t j = 0; j < K; ++j) total += yr[j];
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < K; ++j) yr[j] *= inv;
  }
  return make_result(x.shape(), out, {&x}, [rows, K, inv_t](Node& self) {
    auto& X = self.inputs[0];
    if (!wants(X)) return;
    const double* y = self.v();
    const double* g = self.grad->data();
    double* gx = X->g();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y + r * K;
      const double* gr = g + r * K;
      double dot = 0.0;
      for (std::size_t j = 0; j < K; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < K; ++j) gx[r * K + j] += yr[j] * (gr[j] - dot) * inv_t;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  const std::size_t d = last_dim(x, "layer_norm");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " + shape_string(bias.shape()) +
                         " do not match normalized axis of " + shape_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto out = std::make_shared<Buffer>(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* px = x.values().data();
  const double* pg = gain.values().data();
  const double* pb = bias.values().data();
  double* py = out->data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      py[r * d + j] = h * pg[j] + pb[j];
    }
  }
  return make_result(x.shape(), out, {&x, &gain, &bias}, [rows, d, xhat, rstd](Node& self) {
    auto& X = self.inputs[0];
    auto& G = self.inputs[1];
    auto& Bn = self.inputs[2];
    const double* g = self.grad->data();
    const double* gain_v = G->v();
    const double* xh = xhat->data();
    if (wants(G) || wants(Bn)) {
      double* gg = wants(G) ? G->g() : nullptr;
      double* gb = wants(Bn) ? Bn->g() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          if (gg) gg[j] += g[r * d + j] * xh[r * d + j];
          if (gb) gb[j] += g[r * d + j];
        }
      }
    }
    if (!wants(X)) return;
    double* gx = X->g();
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double gh = g[r * d + j] * gain_v[j];
        s1 += gh;
        s2 += gh * xh[r * d + j];
      }
      s1 *= inv_d;
      s2 *= inv_d;
      const double rs = (*rstd)[r];
      for (std::size_t j = 0; j < d; ++j) {
        const double gh = g[r * d + j] * gain_v[j];
        gx[r * d + j] += rs * (gh - s1 - xh[r * d + j] * s2);
      }
    }
  });
}

Tensor batch_norm_1d(const Tensor& x, const Tensor& gain, const Tensor& bias, BatchNormStats& stats, Mode mode,
                     double momentum, double eps) {
  require_defined(x, "batch_norm_1d");
  if (x.rank() != 2) throw DimensionError("batch_norm_1d: expected [B, d], got " + shape_string(x.shape()));
  const std::size_t B = x.dim(0), d = x.dim(1);
  if (gain.numel() != d || bias.numel() != d || stats.mean.size() != d || stats.var.size() != d) {
    throw DimensionError("batch_norm_1d: affine/statistics size does not match feature axis of " +
                         shape_string(x.shape()));
  }
  if (mode == Mode::Train && B < 2) {
    throw PreconditionError("batch_norm_1d: train mode needs at least 2 rows, got " + std::to_string(B));
  }
  const double* px = x.values().data();
  const double* pg = gain.values().data();
  const double* pb = bias.values().data();
  auto out = std::make_shared<Buffer>(B * d);
  auto xhat = std::make_shared<std::vector<double>>(B * d);
  auto rstd = std::make_shared<std::vector<double>>(d);
  for (std::size_t j = 0; j < d; ++j) {
    double mu, var;
    if (mode == Mode::Train) {
      mu = 0.0;
      for (std::size_t i = 0; i < B; ++i) mu += px[i * d + j];
      mu /= static_cast<double>(B);
      var = 0.0;
      for (std::size_t i = 0; i < B; ++i) var += (px[i * d + j] - mu) * (px[i * d + j] - mu);
      var /= static_cast<double>(B);
      stats.mean[j] = (1.0 - momentum) * stats.mean[j] + momentum * mu;
      stats.var[j] = (1.0 - momentum) * stats.var[j] + momentum * var * static_cast<double>(B) / static_cast<double>(B - 1);
    } else {
      mu = stats.mean[j];
      var = stats.var[j];
    }
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[j] = rs;
    for (std::size_t i = 0; i < B; ++i) {
      const double h = (px[i * d + j] - mu) * rs;
      (*xhat)[i * d + j] = h;
      out->data()[i * d + j] = h * pg[j] + pb[j];
    }
  }
  const bool batch_stats = mode == Mode::Train;
  return make_result({B, d}, out, {&x, &gain, &bias}, [B, d, xhat, rstd, batch_stats](Node& self) {
    auto& X = self.inputs[0];
    auto& G = self.inputs[1];
    auto& Bn = self.inputs[2];
    const double* g = self.grad->data();
    const double* xh = xhat->data();
    const double* gain_v = G->v();
    double* gg = wants(G) ? G->g() : nullptr;
    double* gb = wants(Bn) ? Bn->g() : nullptr;
    double* gx = wants(X) ? X->g() : nullptr;
    const double inv_b = 1.0 / static_cast<double>(B);
    for (std::size_t j = 0; j < d; ++j) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < B; ++i) {
        const double gi = g[i * d + j];
        if (gg) gg[j] += gi * xh[i * d + j];
        if (gb) gb[j] += gi;
        s1 += gi * gain_v[j];
        s2 += gi * gain_v[j] * xh[i * d + j];
      }
      if (!gx) continue;
      const double rs = (*rstd)[j];
      for (std::size_t i = 0; i < B; ++i) {
        const double gh = g[i * d + j] * gain_v[j];
        gx[i * d + j] += batch_stats ? rs * (gh - s1 * inv_b - xh[i * d + j] * s2 * inv_b) : rs * gh;
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  const std::size_t n = x.numel();
  auto out = std::make_shared<Buffer>(n);
  std::shared_ptr<std::vector<double>> slope;
  if (x.requires_grad() && grad_recording_enabled()) slope = std::make_shared<std::vector<double>>(n);
  // tanh form: 0.5 x (1 + tanh(u)), u = sqrt(2/pi) (x + 0.044715 x^3), with
  // tanh(u) = 1 - 2 / (exp(2u) + 1) so the vectorised exp does the work.
  constexpr double kC = 0.79788456080286535588, kA = 0.044715;
  constexpr std::size_t kChunk = 1024;
  using Arr = Eigen::Array<double, Eigen::Dynamic, 1>;
  Arr t(static_cast<Eigen::Index>(kChunk));
  for (std::size_t lo = 0; lo < n; lo += kChunk) {
    const auto len = static_cast<Eigen::Index>(std::min(kChunk, n - lo));
    Eigen::Map<const Arr> v(x.values().data() + lo, len);
    auto tc = t.head(len);
    tc = 1.0 - 2.0 / ((2.0 * kC * (v + kA * v.cube())).min(40.0).exp() + 1.0);
    Eigen::Map<Arr>(out->data() + lo, len) = 0.5 * v * (1.0 + tc);
    if (slope) {
      Eigen::Map<Arr>(slope->data() + lo, len) =
          0.5 * (1.0 + tc) + 0.5 * v * (1.0 - tc.square()) * kC * (1.0 + 3.0 * kA * v.square());
    }
  }
  return make_result(x.shape(), out, {&x}, [n, slope](Node& self) {
    auto& X = self.inputs[0];
    if (!wants(X)) return;
    const double* g = self.grad->data();
    double* gx = X->g();
    const double* s = slope->data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * s[i];
  });
}

namespace {

// Error-free transforms for double-double arithmetic.
inline void two_sum(double a, double b, double& s, double& e) {
  s = a + b;
  const double bb = s - a;
  e = (a - (s - bb)) + (b - bb);
}

inline void two_prod(double a, double b, double& p, double& e) {
  p = a * b;
  e = std::fma(a, b, -p);
}

}  // namespace

// Rows are divided by their norm carried in double-double, so each output is
// the correctly rounded unit vector and an exact rescaling of the input gives
// bit-identical output.
Tensor l2_normalize(const Tensor& x) {
  require_defined(x, "l2_normalize");
  const std::size_t d = last_dim(x, "l2_normalize");
  const std::size_t rows = x.numel() / d;
  auto out = std::make_shared<Buffer>(x.numel());
  auto inv_norm = std::make_shared<std::vector<double>>(rows, 0.0);
  const double* px = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double hi = 0.0, lo = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double p, pe, s, se;
      two_prod(xr[j], xr[j], p, pe);
      two_sum(hi, p, s, se);
      lo += se + pe;
      two_sum(s, lo, hi, lo);
    }
    const double root = std::sqrt(hi);
    if (root < 1e-12) continue;
    // norm = root + root_lo to about 100 bits
    double rr, rre;
    two_prod(root, root, rr, rre);
    const double root_lo = ((hi - rr) - rre + lo) / (2.0 * root);
    (*inv_norm)[r] = 1.0 / (root + root_lo);
    double* yr = out->data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      const double q1 = xr[j] / root;
      double p, pe;
      two_prod(q1, root, p, pe);
      const double rem = ((xr[j] - p) - pe) - q1 * root_lo;
      yr[j] = q1 + rem / root;
    }
  }
  return make_result(x.shape(), out, {&x}, [rows, d, inv_norm](Node& self) {
    auto& X = self.inputs[0];
    if (!wants(X)) return;
    const double* y = self.v();
    const double* g = self.grad->data();
    double* gx = X->g();
    for (std::size_t r = 0; r < rows; ++r) {
      const double inv = (*inv_norm)[r];
      if (inv == 0.0) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError("add: cannot broadcast " + shape_string(b.shape()) + " onto " + shape_string(a.shape()));
  }
  const std::size_t n = a.numel(), m = b.numel();
  auto out = std::make_shared<Buffer>(n);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out->data()[i] = pa[i] + pb[i % m];
  return make_result(a.shape(), out, {&a, &b}, [n, m](Node& self) {
    const double* g = self.grad->data();
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    if (wants(A)) {
      double* ga = A->g();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (wants(B)) {
      double* gb = B->g();
      for (std::size_t i = 0; i < n; ++i) gb[i % m] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same(a, b, "sub");
  const std::size_t n = a.numel();
  auto out = std::make_shared<Buffer>(n);
  for (std::size_t i = 0; i < n; ++i) out->data()[i] = a.values()[i] - b.values()[i];
  return make_result(a.shape(), out, {&a, &b}, [n](Node& self) {
    const double* g = self.grad->data();
    if (wants(self.inputs[0])) {
      double* ga = self.inputs[0]->g();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (wants(self.inputs[1])) {
      double* gb = self.inputs[1]->g();
      for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same(a, b, "mul");
  const std::size_t n = a.numel();
  auto out = std::make_shared<Buffer>(n);
  for (std::size_t i = 0; i < n; ++i) out->data()[i] = a.values()[i] * b.values()[i];
  return make_result(a.shape(), out, {&a, &b}, [n](Node& self) {
    const double* g = self.grad->data();
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    if (wants(A)) {
      double* ga = A->g();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * B->v()[i];
    }
    if (wants(B)) {
      double* gb = B->g();
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * A->v()[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  const std::size_t n = x.numel();
  auto out = std::make_shared<Buffer>(n);
  for (std::size_t i = 0; i < n; ++i) out->data()[i] = x.values()[i] * factor;
  return make_result(x.shape(), out, {&x}, [n, factor](Node& self) {
    if (!wants(self.inputs[0])) return;
    double* gx = self.inputs[0]->g();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad->data()[i] * factor;
  });
}

Tensor log(const Tensor& x, double eps) {
  require_defined(x, "log");
  const std::size_t n = x.numel();
  auto out = std::make_shared<Buffer>(n);
  for (std::size_t i = 0; i < n; ++i) out->data()[i] = std::log(x.values()[i] + eps);
  return make_result(x.shape(), out, {&x}, [n, eps](Node& self) {
    auto& X = self.inputs[0];
    if (!wants(X)) return;
    double* gx = X->g();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad->data()[i] / (X->v()[i] + eps);
  });
}

Tensor exp(const Tensor& x) {
  require_defined(x, "exp");
  const std::size_t n = x.numel();
  auto out = std::make_shared<Buffer>(n);
  for (std::size_t i = 0; i < n; ++i) out->data()[i] = std::exp(x.values()[i]);
  return make_result(x.shape(), out, {&x}, [n](Node& self) {
    auto& X = self.inputs[0];
    if (!wants(X)) return;
    double* gx = X->g();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad->data()[i] * self.v()[i];
  });
}

Tensor entropy(const Tensor& p) {
  require_defined(p, "entropy");
  const std::size_t K = last_dim(p, "entropy");
  const std::size_t rows = p.numel() / K;
  Shape shape(p.shape().begin(), p.shape().end() - 1);
  auto out = std::make_shared<Buffer>(rows);
  const double* pv = p.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double h = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      const double v = pv[r * K + j];
      if (v > 0.0) h -= v * std::log(v);
    }
    out->data()[r] = h;
  }
  return make_result(std::move(shape), out, {&p}, [rows, K](Node& self) {
    auto& P = self.inputs[0];
    if (!wants(P)) return;
    double* gp = P->g();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < K; ++j) {
        const double v = P->v()[r * K + j];
        if (v > 0.0) gp[r * K + j] -= self.grad->data()[r] * (std::log(v) + 1.0);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  const std::size_t n = x.numel();
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({}, std::make_shared<Buffer>(std::vector<double>{total}), {&x}, [n](Node& self) {
    if (!wants(self.inputs[0])) return;
    double* gx = self.inputs[0]->g();
    const double g = self.grad->data()[0];
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, std::size_t axis) {
  require_defined(x, "sum");
  if (axis >= x.rank()) {
    throw DimensionError("sum: axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto out = std::make_shared<Buffer>(s.outer * s.inner);
  const double* px = x.values().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t a = 0; a < s.extent; ++a) {
      const double* row = px + (o * s.extent + a) * s.inner;
      double* dst = out->data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
    }
  }
  return make_result(std::move(shape), out, {&x}, [s](Node& self) {
    if (!wants(self.inputs[0])) return;
    double* gx = self.inputs[0]->g();
    const double* g = self.grad->data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t a = 0; a < s.extent; ++a) {
        double* dst = gx + (o * s.extent + a) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[o * s.inner + i];
      }
    }
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  require_defined(x, "mean");
  if (axis >= x.rank()) {
    throw DimensionError("mean: axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  }
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// structure

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw PreconditionError("concat: no tensors");
  for (const Tensor& p : parts) require_defined(p, "concat");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_string(first));
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape a = p.shape(), b = first;
    if (a.size() != b.size()) throw DimensionError("concat: rank mismatch " + shape_string(a) + " vs " + shape_string(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat: shape mismatch " + shape_string(p.shape()) + " vs " + shape_string(first));
    extents.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  Shape shape = first;
  shape[axis] = total;
  const AxisSplit s = split_axis(shape, axis);
  auto out = std::make_shared<Buffer>(shape_numel(shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].values().data();
    const std::size_t chunk = extents[k] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(src + o * chunk, chunk, out->data() + o * total * s.inner + offset * s.inner);
    }
    offset += extents[k];
  }
  return make_result_n(std::move(shape), out, parts, [s, total, extents](Node& self) {
    std::size_t off = 0;
    const double* g = self.grad->data();
    for (std::size_t k = 0; k < extents.size(); ++k) {
      const std::size_t chunk = extents[k] * s.inner;
      if (wants(self.inputs[k])) {
        double* gp = self.inputs[k]->g();
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = g + o * total * s.inner + off * s.inner;
          for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
        }
      }
      off += extents[k];
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined(x, "slice");
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " invalid for " + shape_string(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  const std::size_t len = end - begin;
  Shape shape = x.shape();
  shape[axis] = len;
  auto out = std::make_shared<Buffer>(s.outer * len * s.inner);
  const double* px = x.values().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(px + (o * s.extent + begin) * s.inner, len * s.inner, out->data() + o * len * s.inner);
  }
  return make_result(std::move(shape), out, {&x}, [s, begin, len](Node& self) {
    if (!wants(self.inputs[0])) return;
    double* gx = self.inputs[0]->g();
    const double* g = self.grad->data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* dst = gx + (o * s.extent + begin) * s.inner;
      const double* src = g + o * len * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  const std::size_t n = x.numel();
  // Values are shared; ops never write into their inputs.
  return make_result(std::move(shape), x.node()->data, {&x}, [n](Node& self) {
    if (!wants(self.inputs[0])) return;
    double* gx = self.inputs[0]->g();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad->data()[i];
  });
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  require_defined(x, "transpose");
  if (axis0 >= x.rank() || axis1 >= x.rank()) {
    throw DimensionError("transpose: axes out of range for " + shape_string(x.shape()));
  }
  if (axis0 > axis1) std::swap(axis0, axis1);
  const Shape& in = x.shape();
  Shape shape = in;
  std::swap(shape[axis0], shape[axis1]);
  // View the tensor as [pre, A, mid, B, post] and swap A and B.
  std::size_t pre = 1, mid = 1, post = 1;
  for (std::size_t i = 0; i < axis0; ++i) pre *= in[i];
  for (std::size_t i = axis0 + 1; i < axis1; ++i) mid *= in[i];
  for (std::size_t i = axis1 + 1; i < in.size(); ++i) post *= in[i];
  const std::size_t A = in[axis0], Bd = in[axis1];
  auto index_in = [=](std::size_t p, std::size_t a, std::size_t m, std::size_t b) {
    return (((p * A + a) * mid + m) * Bd + b) * post;
  };
  auto index_out = [=](std::size_t p, std::size_t a, std::size_t m, std::size_t b) {
    return (((p * Bd + b) * mid + m) * A + a) * post;
  };
  auto out = std::make_shared<Buffer>(x.numel());
  const double* px = x.values().data();
  for (std::size_t p = 0; p < pre; ++p)
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t m = 0; m < mid; ++m)
        for (std::size_t b = 0; b < Bd; ++b) std::copy_n(px + index_in(p, a, m, b), post, out->data() + index_out(p, a, m, b));
  return make_result(std::move(shape), out, {&x}, [=](Node& self) {
    if (!wants(self.inputs[0])) return;
    double* gx = self.inputs[0]->g();
    const double* g = self.grad->data();
    for (std::size_t p = 0; p < pre; ++p)
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t m = 0; m < mid; ++m)
          for (std::size_t b = 0; b < Bd; ++b) {
            double* dst = gx + index_in(p, a, m, b);
            const double* src = g + index_out(p, a, m, b);
            for (std::size_t i = 0; i < post; ++i) dst[i] += src[i];
          }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  require_defined(table, "gather_rows");
  if (table.rank() != 2) throw DimensionError("gather_rows: expected [P, d] table, got " + shape_string(table.shape()));
  if (indices.empty()) throw PreconditionError("gather_rows: empty index list");
  const std::size_t P = table.dim(0), d = table.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  auto out = std::make_shared<Buffer>(idx->size() * d);
  for (std::size_t r = 0; r < idx->size(); ++r) {
    if ((*idx)[r] >= P) {
      throw DimensionError("gather_rows: index " + std::to_string((*idx)[r]) + " out of range for " +
                           std::to_string(P) + " rows");
    }
    std::copy_n(table.values().data() + (*idx)[r] * d, d, out->data() + r * d);
  }
  return make_result({idx->size(), d}, out, {&table}, [idx, d](Node& self) {
    if (!wants(self.inputs[0])) return;
    double* gt = self.inputs[0]->g();
    const double* g = self.grad->data();
    for (std::size_t r = 0; r < idx->size(); ++r) {
      double* dst = gt + (*idx)[r] * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += g[r * d + j];
    }
  });
}

Tensor repeat(const Tensor& x, std::size_t count) {
  require_defined(x, "repeat");
  if (count == 0) throw PreconditionError("repeat: count must be >= 1");
  const std::size_t n = x.numel();
  Shape shape = x.shape();
  shape.insert(shape.begin(), count);
  auto out = std::make_shared<Buffer>(n * count);
  for (std::size_t c = 0; c < count; ++c) std::copy_n(x.values().data(), n, out->data() + c * n);
  return make_result(std::move(shape), out, {&x}, [n, count](Node& self) {
    if (!wants(self.inputs[0])) return;
    double* gx = self.inputs[0]->g();
    for (std::size_t c = 0; c < count; ++c)
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad->data()[c * n + i];
  });
}

}  // namespace msn
