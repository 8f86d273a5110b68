#include "vitquant/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "vitquant/errors.hpp"

namespace vitquant {

namespace detail {

struct Node {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward_fn;

  std::size_t numel() const { return data.size(); }

  void accumulate(std::size_t i, double v) {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    grad[i] += v;
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

NodePtr make_node(std::vector<int> shape) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data.assign(shape_numel(n->shape), 0.0);
  return n;
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

// Links `out` to its operands when gradient tracking is needed.
void attach(const NodePtr& out, std::vector<NodePtr> parents,
            std::function<void(const Node&)> backward_fn) {
  bool needed = false;
  for (const auto& p : parents) needed = needed || p->requires_grad;
  if (!needed) return;
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backward_fn = std::move(backward_fn);
}

std::vector<int> broadcast_result_shape(const std::vector<int>& a, const std::vector<int>& b,
                                        const char* op) {
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  std::vector<int> out(r);
  for (int i = 0; i < r; ++i) {
    const int da = i < r - ra ? 1 : a[i - (r - ra)];
    const int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` right-aligned into `out_shape`; broadcast dims get 0.
std::vector<std::size_t> broadcast_strides(const std::vector<int>& shape,
                                           const std::vector<int>& out_shape) {
  const int r = static_cast<int>(out_shape.size());
  const int offset = r - static_cast<int>(shape.size());
  std::vector<std::size_t> strides(r, 0);
  std::size_t s = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    strides[i + offset] = (shape[i] == 1 && out_shape[i + offset] != 1) ? 0 : s;
    s *= static_cast<std::size_t>(shape[i]);
  }
  return strides;
}

// Calls fn(out_index, a_index, b_index) over every position of out_shape.
template <typename Fn>
void for_each_broadcast(const std::vector<int>& out_shape, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const int r = static_cast<int>(out_shape.size());
  const std::size_t total = shape_numel(out_shape);
  std::vector<int> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    fn(i, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out_shape[d]) break;
      ia -= sa[d] * static_cast<std::size_t>(out_shape[d]);
      ib -= sb[d] * static_cast<std::size_t>(out_shape[d]);
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

Tensor binary_op(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  check_defined(a, name);
  check_defined(b, name);
  const NodePtr an = a.node();
  const NodePtr bn = b.node();
  auto out_shape = broadcast_result_shape(an->shape, bn->shape, name);
  auto out = make_node(out_shape);
  const auto sa = broadcast_strides(an->shape, out_shape);
  const auto sb = broadcast_strides(bn->shape, out_shape);

  for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    const double x = an->data[ia];
    const double y = bn->data[ib];
    switch (kind) {
      case BinaryKind::kAdd: out->data[i] = x + y; break;
      case BinaryKind::kSub: out->data[i] = x - y; break;
      case BinaryKind::kMul: out->data[i] = x * y; break;
      case BinaryKind::kDiv: out->data[i] = x / y; break;
    }
  });

  attach(out, {an, bn}, [an, bn, out_shape, sa, sb, kind](const Node& o) {
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      const double g = o.grad[i];
      switch (kind) {
        case BinaryKind::kAdd:
          if (an->requires_grad) an->grad[ia] += g;
          if (bn->requires_grad) bn->grad[ib] += g;
          break;
        case BinaryKind::kSub:
          if (an->requires_grad) an->grad[ia] += g;
          if (bn->requires_grad) bn->grad[ib] -= g;
          break;
        case BinaryKind::kMul:
          if (an->requires_grad) an->grad[ia] += g * bn->data[ib];
          if (bn->requires_grad) bn->grad[ib] += g * an->data[ia];
          break;
        case BinaryKind::kDiv: {
          const double y = bn->data[ib];
          if (an->requires_grad) an->grad[ia] += g / y;
          if (bn->requires_grad) bn->grad[ib] -= g * an->data[ia] / (y * y);
          break;
        }
      }
    });
  });
  return Tensor(out);
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = make_node(std::move(shape));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  auto n = make_node(std::move(shape));
  std::fill(n->data.begin(), n->data.end(), value);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("from_data: " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

const std::vector<int>& Tensor::shape() const {
  check_defined(*this, "shape");
  return node_->shape;
}

int Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw DimensionError("dim: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const {
  check_defined(*this, "size");
  return node_->numel();
}

std::span<const double> Tensor::data() const {
  check_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  check_defined(*this, "mutable_data");
  return node_->data;
}

bool Tensor::requires_grad() const {
  check_defined(*this, "requires_grad");
  return node_->requires_grad;
}

void Tensor::set_requires_grad(bool value) {
  check_defined(*this, "set_requires_grad");
  if (!node_->parents.empty()) {
    throw ContractError("set_requires_grad: only leaf tensors may be toggled");
  }
  node_->requires_grad = value;
}

bool Tensor::has_grad() const {
  check_defined(*this, "has_grad");
  return node_->grad.size() == node_->data.size();
}

std::span<const double> Tensor::grad() const {
  check_defined(*this, "grad");
  if (!has_grad()) throw ContractError("grad: no gradient accumulated");
  return node_->grad;
}

void Tensor::zero_grad() {
  check_defined(*this, "zero_grad");
  node_->grad.clear();
}

double Tensor::item() const {
  check_defined(*this, "item");
  if (node_->numel() != 1) {
    throw DimensionError("item: tensor of shape " + shape_str(node_->shape) + " is not scalar");
  }
  return node_->data[0];
}

Tensor Tensor::clone(bool requires_grad) const {
  check_defined(*this, "clone");
  return from_data(node_->shape, node_->data, requires_grad);
}

void Tensor::backward() const {
  check_defined(*this, "backward");
  if (node_->numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(node_->shape));
  }
  if (!node_->requires_grad) {
    throw ContractError("backward: loss does not depend on any tracked tensor");
  }
  if (node_->backward_done) {
    throw ContractError("backward: already called on this result; re-run the forward pass");
  }
  node_->backward_done = true;

  // Reverse topological order via iterative post-order DFS over parents.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [cur, next_child] = stack.back();
    if (next_child < cur->parents.size()) {
      Node* p = cur->parents[next_child++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(cur);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() == n->data.size()) n->backward_fn(*n);
  }
}

// ------------------------------------------------------------- arithmetic

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::kMul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::kDiv, "div"); }

Tensor add(const Tensor& a, double c) {
  return elementwise_unary(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor mul(const Tensor& a, double c) {
  return elementwise_unary(a, [c](double x) { return x * c; }, [c](double) { return c; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

// ---------------------------------------------------------------- unaries

Tensor elementwise_unary(const Tensor& a, std::function<double(double)> f,
                         std::function<double(double)> dfdx) {
  check_defined(a, "elementwise_unary");
  const NodePtr an = a.node();
  auto out = make_node(an->shape);
  for (std::size_t i = 0; i < an->numel(); ++i) out->data[i] = f(an->data[i]);
  attach(out, {an}, [an, dfdx = std::move(dfdx)](const Node& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < an->numel(); ++i) an->grad[i] += o.grad[i] * dfdx(an->data[i]);
  });
  return Tensor(out);
}

Tensor exp(const Tensor& a) {
  return elementwise_unary(a, [](double x) { return std::exp(x); },
                           [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw ContractError("log: input must be strictly positive");
  }
  return elementwise_unary(a, [](double x) { return std::log(x); },
                           [](double x) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw ContractError("sqrt: input must be non-negative");
  }
  return elementwise_unary(a, [](double x) { return std::sqrt(x); },
                           [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor abs(const Tensor& a) {
  return elementwise_unary(a, [](double x) { return std::fabs(x); },
                           [](double x) { return x >= 0.0 ? 1.0 : -1.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779399460599344;
  return elementwise_unary(
      a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [=](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

// ----------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  const NodePtr an = a.node();
  const NodePtr bn = b.node();
  const auto& sa = an->shape;
  const auto& sb = bn->shape;
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError("matmul: operands must be at least rank 2, got " + shape_str(sa) +
                         " and " + shape_str(sb));
  }
  const bool shared_b = sb.size() == 2 && sa.size() >= 2;
  if (!shared_b && sa.size() != sb.size()) {
    throw DimensionError("matmul: rank mismatch between " + shape_str(sa) + " and " +
                         shape_str(sb));
  }
  const int m = sa[sa.size() - 2];
  const int k = sa[sa.size() - 1];
  const int kb = sb[sb.size() - 2];
  const int n = sb[sb.size() - 1];
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions disagree between " + shape_str(sa) + " and " +
                         shape_str(sb));
  }
  std::size_t batches = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) {
    batches *= static_cast<std::size_t>(sa[i]);
    if (!shared_b && sa[i] != sb[i]) {
      throw DimensionError("matmul: leading dimensions disagree between " + shape_str(sa) +
                           " and " + shape_str(sb));
    }
  }
  std::vector<int> out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  auto out = make_node(out_shape);

  const std::size_t a_stride = static_cast<std::size_t>(m) * k;
  const std::size_t b_stride = shared_b ? 0 : static_cast<std::size_t>(k) * n;
  const std::size_t c_stride = static_cast<std::size_t>(m) * n;

  for (std::size_t bi = 0; bi < batches; ++bi) {
    const double* A = an->data.data() + bi * a_stride;
    const double* B = bn->data.data() + bi * b_stride;
    double* C = out->data.data() + bi * c_stride;
    for (int i = 0; i < m; ++i) {
      for (int kk = 0; kk < k; ++kk) {
        const double av = A[i * k + kk];
        if (av == 0.0) continue;
        const double* Brow = B + kk * n;
        double* Crow = C + i * n;
        for (int j = 0; j < n; ++j) Crow[j] += av * Brow[j];
      }
    }
  }

  attach(out, {an, bn}, [an, bn, batches, m, k, n, a_stride, b_stride, c_stride](const Node& o) {
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const double* A = an->data.data() + bi * a_stride;
      const double* B = bn->data.data() + bi * b_stride;
      const double* G = o.grad.data() + bi * c_stride;
      if (an->requires_grad) {
        double* GA = an->grad.data() + bi * a_stride;
        // dA = G * B^T
        for (int i = 0; i < m; ++i) {
          for (int kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += G[i * n + j] * B[kk * n + j];
            GA[i * k + kk] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        double* GB = bn->grad.data() + bi * b_stride;
        // dB = A^T * G (accumulates over batches when B is shared)
        for (int kk = 0; kk < k; ++kk) {
          for (int i = 0; i < m; ++i) {
            const double av = A[i * k + kk];
            if (av == 0.0) continue;
            const double* Grow = G + i * n;
            double* GBrow = GB + kk * n;
            for (int j = 0; j < n; ++j) GBrow[j] += av * Grow[j];
          }
        }
      }
    }
  });
  return Tensor(out);
}

// ---------------------------------------------------------- normalization

namespace {

struct AxisIter {
  std::size_t outer, len, inner;
};

AxisIter axis_iter(const std::vector<int>& shape, int& axis, const char* op) {
  if (axis < 0) axis += static_cast<int>(shape.size());
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw DimensionError(std::string(op) + ": axis out of range for " + shape_str(shape));
  }
  AxisIter it{1, static_cast<std::size_t>(shape[axis]), 1};
  for (int i = 0; i < axis; ++i) it.outer *= static_cast<std::size_t>(shape[i]);
  for (std::size_t i = axis + 1; i < shape.size(); ++i) {
    it.inner *= static_cast<std::size_t>(shape[i]);
  }
  return it;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  check_defined(x, "softmax");
  const NodePtr xn = x.node();
  int ax = axis;
  const AxisIter it = axis_iter(xn->shape, ax, "softmax");
  auto out = make_node(xn->shape);

  for (std::size_t o = 0; o < it.outer; ++o) {
    for (std::size_t in = 0; in < it.inner; ++in) {
      const std::size_t base = o * it.len * it.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < it.len; ++t) mx = std::max(mx, xn->data[base + t * it.inner]);
      double total = 0.0;
      for (std::size_t t = 0; t < it.len; ++t) {
        const double e = std::exp(xn->data[base + t * it.inner] - mx);
        out->data[base + t * it.inner] = e;
        total += e;
      }
      for (std::size_t t = 0; t < it.len; ++t) out->data[base + t * it.inner] /= total;
    }
  }

  // The output values are read back from the node handed to the rule; holding
  // a NodePtr to `out` here would create a reference cycle.
  attach(out, {xn}, [xn, it](const Node& o) {
    xn->ensure_grad();
    for (std::size_t ou = 0; ou < it.outer; ++ou) {
      for (std::size_t in = 0; in < it.inner; ++in) {
        const std::size_t base = ou * it.len * it.inner + in;
        double dot = 0.0;
        for (std::size_t t = 0; t < it.len; ++t) {
          const std::size_t i = base + t * it.inner;
          dot += o.grad[i] * o.data[i];
        }
        for (std::size_t t = 0; t < it.len; ++t) {
          const std::size_t i = base + t * it.inner;
          xn->grad[i] += o.data[i] * (o.grad[i] - dot);
        }
      }
    }
  });
  return Tensor(out);
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check_defined(x, "layernorm");
  check_defined(gain, "layernorm");
  check_defined(bias, "layernorm");
  if (eps <= 0.0) throw ContractError("layernorm: eps must be positive");
  const NodePtr xn = x.node();
  const NodePtr gn = gain.node();
  const NodePtr bn = bias.node();
  if (xn->shape.empty()) throw DimensionError("layernorm: input must have rank >= 1");
  const int d = xn->shape.back();
  if (gn->shape != std::vector<int>{d} || bn->shape != std::vector<int>{d}) {
    throw DimensionError("layernorm: gain/bias must have shape [" + std::to_string(d) + "]");
  }
  const std::size_t rows = xn->numel() / static_cast<std::size_t>(d);
  auto out = make_node(xn->shape);
  // Saved per row for the backward rule.
  auto xhat = std::make_shared<std::vector<double>>(xn->numel());
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);

  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xn->data.data() + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = inv;
    for (int j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * inv;
      (*xhat)[r * d + j] = xh;
      out->data[r * d + j] = gn->data[j] * xh + bn->data[j];
    }
  }

  attach(out, {xn, gn, bn}, [xn, gn, bn, xhat, inv_sigma, rows, d](const Node& o) {
    if (xn->requires_grad) xn->ensure_grad();
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = o.grad.data() + r * d;
      const double* xh = xhat->data() + r * d;
      if (gn->requires_grad || bn->requires_grad) {
        for (int j = 0; j < d; ++j) {
          if (gn->requires_grad) gn->grad[j] += g[j] * xh[j];
          if (bn->requires_grad) bn->grad[j] += g[j];
        }
      }
      if (xn->requires_grad) {
        double mean_gy = 0.0, mean_gy_xh = 0.0;
        for (int j = 0; j < d; ++j) {
          const double gy = g[j] * gn->data[j];
          mean_gy += gy;
          mean_gy_xh += gy * xh[j];
        }
        mean_gy /= d;
        mean_gy_xh /= d;
        const double inv = (*inv_sigma)[r];
        for (int j = 0; j < d; ++j) {
          const double gy = g[j] * gn->data[j];
          xn->grad[r * d + j] += inv * (gy - mean_gy - xh[j] * mean_gy_xh);
        }
      }
    }
  });
  return Tensor(out);
}

// ------------------------------------------------------------------ shape

Tensor reshape(const Tensor& t, std::vector<int> shape) {
  check_defined(t, "reshape");
  const NodePtr tn = t.node();
  if (shape_numel(shape) != tn->numel()) {
    throw DimensionError("reshape: " + shape_str(tn->shape) + " -> " + shape_str(shape) +
                         " changes element count");
  }
  auto out = make_node(std::move(shape));
  out->data = tn->data;
  attach(out, {tn}, [tn](const Node& o) {
    tn->ensure_grad();
    for (std::size_t i = 0; i < tn->numel(); ++i) tn->grad[i] += o.grad[i];
  });
  return Tensor(out);
}

namespace {

std::vector<std::size_t> row_major_strides(const std::vector<int>& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    s[i] = s[i + 1] * static_cast<std::size_t>(shape[i + 1]);
  }
  return s;
}

// Source index for every element of the permuted result, in result order.
std::vector<std::size_t> permutation_map(const std::vector<int>& in_shape,
                                         const std::vector<int>& axes) {
  std::vector<int> out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = in_shape[axes[i]];
  const auto in_strides = row_major_strides(in_shape);
  const std::size_t total = shape_numel(out_shape);
  std::vector<std::size_t> map(total);
  std::vector<int> idx(axes.size(), 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < total; ++i) {
    map[i] = src;
    for (int d = static_cast<int>(axes.size()) - 1; d >= 0; --d) {
      ++idx[d];
      src += in_strides[axes[d]];
      if (idx[d] < out_shape[d]) break;
      src -= in_strides[axes[d]] * static_cast<std::size_t>(out_shape[d]);
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& t, const std::vector<int>& axes) {
  check_defined(t, "permute");
  const NodePtr tn = t.node();
  if (axes.size() != tn->shape.size()) {
    throw DimensionError("permute: axes " + shape_str(axes) + " do not match rank of " +
                         shape_str(tn->shape));
  }
  std::vector<bool> seen(axes.size(), false);
  for (int a : axes) {
    if (a < 0 || a >= static_cast<int>(axes.size()) || seen[a]) {
      throw DimensionError("permute: invalid axis list " + shape_str(axes));
    }
    seen[a] = true;
  }
  std::vector<int> out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = tn->shape[axes[i]];
  auto map = std::make_shared<std::vector<std::size_t>>(permutation_map(tn->shape, axes));
  auto out = make_node(out_shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = tn->data[(*map)[i]];
  attach(out, {tn}, [tn, map](const Node& o) {
    tn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) tn->grad[(*map)[i]] += o.grad[i];
  });
  return Tensor(out);
}

Tensor transpose(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("transpose: expected rank-2 tensor");
  return permute(t, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no tensors given");
  for (const auto& p : parts) check_defined(p, "concat");
  const auto& first = parts.front().shape();
  int ax = axis;
  if (ax < 0) ax += static_cast<int>(first.size());
  if (ax < 0 || ax >= static_cast<int>(first.size())) {
    throw DimensionError("concat: axis out of range for " + shape_str(first));
  }
  std::vector<int> out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != ax && s[i] != first[i]) {
        throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " +
                             shape_str(first));
      }
    }
    out_shape[ax] += s[ax];
  }

  auto out = make_node(out_shape);
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= static_cast<std::size_t>(out_shape[i]);
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) {
    inner *= static_cast<std::size_t>(out_shape[i]);
  }

  std::vector<NodePtr> nodes;
  std::vector<std::size_t> lens;  // per part: shape[ax] * inner
  nodes.reserve(parts.size());
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    lens.push_back(static_cast<std::size_t>(p.shape()[ax]) * inner);
  }
  const std::size_t out_row = static_cast<std::size_t>(out_shape[ax]) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
      const double* src = nodes[pi]->data.data() + o * lens[pi];
      std::copy(src, src + lens[pi], out->data.data() + o * out_row + off);
      off += lens[pi];
    }
  }

  attach(out, nodes, [nodes, lens, outer, out_row](const Node& o) {
    for (std::size_t o_i = 0; o_i < outer; ++o_i) {
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        if (nodes[pi]->requires_grad) {
          nodes[pi]->ensure_grad();
          double* dst = nodes[pi]->grad.data() + o_i * lens[pi];
          const double* src = o.grad.data() + o_i * out_row + off;
          for (std::size_t i = 0; i < lens[pi]; ++i) dst[i] += src[i];
        }
        off += lens[pi];
      }
    }
  });
  return Tensor(out);
}

Tensor narrow(const Tensor& t, int axis, int start, int length) {
  check_defined(t, "narrow");
  const NodePtr tn = t.node();
  int ax = axis;
  const AxisIter it = axis_iter(tn->shape, ax, "narrow");
  if (start < 0 || length <= 0 || start + length > static_cast<int>(it.len)) {
    throw DimensionError("narrow: window [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") outside axis of length " +
                         std::to_string(it.len));
  }
  std::vector<int> out_shape = tn->shape;
  out_shape[ax] = length;
  auto out = make_node(out_shape);
  const std::size_t in_row = it.len * it.inner;
  const std::size_t out_row = static_cast<std::size_t>(length) * it.inner;
  for (std::size_t o = 0; o < it.outer; ++o) {
    const double* src = tn->data.data() + o * in_row + static_cast<std::size_t>(start) * it.inner;
    std::copy(src, src + out_row, out->data.data() + o * out_row);
  }
  attach(out, {tn}, [tn, it, start, in_row, out_row](const Node& o) {
    tn->ensure_grad();
    for (std::size_t ou = 0; ou < it.outer; ++ou) {
      double* dst = tn->grad.data() + ou * in_row + static_cast<std::size_t>(start) * it.inner;
      const double* src = o.grad.data() + ou * out_row;
      for (std::size_t i = 0; i < out_row; ++i) dst[i] += src[i];
    }
  });
  return Tensor(out);
}

std::vector<Tensor> split(const Tensor& t, int axis, int sections) {
  check_defined(t, "split");
  int ax = axis;
  if (ax < 0) ax += t.rank();
  const int len = t.dim(ax);
  if (sections <= 0 || len % sections != 0) {
    throw DimensionError("split: axis of length " + std::to_string(len) +
                         " not divisible into " + std::to_string(sections) + " sections");
  }
  const int step = len / sections;
  std::vector<Tensor> out;
  out.reserve(sections);
  for (int s = 0; s < sections; ++s) out.push_back(narrow(t, ax, s * step, step));
  return out;
}

Tensor select(const Tensor& t, int axis, int index) {
  int ax = axis;
  if (ax < 0) ax += t.rank();
  Tensor slice = narrow(t, ax, index, 1);
  std::vector<int> out_shape = slice.shape();
  out_shape.erase(out_shape.begin() + ax);
  return reshape(slice, out_shape);
}

Tensor index_select(const Tensor& t, int axis, const std::vector<int>& indices) {
  check_defined(t, "index_select");
  if (indices.empty()) throw ContractError("index_select: empty index list");
  const NodePtr tn = t.node();
  int ax = axis;
  const AxisIter it = axis_iter(tn->shape, ax, "index_select");
  for (int i : indices) {
    if (i < 0 || i >= static_cast<int>(it.len)) {
      throw DimensionError("index_select: index " + std::to_string(i) +
                           " outside axis of length " + std::to_string(it.len));
    }
  }
  std::vector<int> out_shape = tn->shape;
  out_shape[ax] = static_cast<int>(indices.size());
  auto out = make_node(out_shape);
  const std::size_t in_row = it.len * it.inner;
  const std::size_t out_row = indices.size() * it.inner;
  for (std::size_t o = 0; o < it.outer; ++o) {
    for (std::size_t s = 0; s < indices.size(); ++s) {
      const double* src =
          tn->data.data() + o * in_row + static_cast<std::size_t>(indices[s]) * it.inner;
      std::copy(src, src + it.inner, out->data.data() + o * out_row + s * it.inner);
    }
  }
  attach(out, {tn}, [tn, it, indices, in_row, out_row](const Node& o) {
    tn->ensure_grad();
    for (std::size_t ou = 0; ou < it.outer; ++ou) {
      for (std::size_t s = 0; s < indices.size(); ++s) {
        double* dst =
            tn->grad.data() + ou * in_row + static_cast<std::size_t>(indices[s]) * it.inner;
        const double* src = o.grad.data() + ou * out_row + s * it.inner;
        for (std::size_t i = 0; i < it.inner; ++i) dst[i] += src[i];
      }
    }
  });
  return Tensor(out);
}

// ------------------------------------------------------------- reductions

Tensor sum(const Tensor& t, int axis) {
  check_defined(t, "sum");
  const NodePtr tn = t.node();
  int ax = axis;
  const AxisIter it = axis_iter(tn->shape, ax, "sum");
  std::vector<int> out_shape = tn->shape;
  out_shape.erase(out_shape.begin() + ax);
  auto out = make_node(out_shape);
  for (std::size_t o = 0; o < it.outer; ++o) {
    for (std::size_t in = 0; in < it.inner; ++in) {
      double acc = 0.0;
      const std::size_t base = o * it.len * it.inner + in;
      for (std::size_t s = 0; s < it.len; ++s) acc += tn->data[base + s * it.inner];
      out->data[o * it.inner + in] = acc;
    }
  }
  attach(out, {tn}, [tn, it](const Node& o) {
    tn->ensure_grad();
    for (std::size_t ou = 0; ou < it.outer; ++ou) {
      for (std::size_t in = 0; in < it.inner; ++in) {
        const double g = o.grad[ou * it.inner + in];
        const std::size_t base = ou * it.len * it.inner + in;
        for (std::size_t s = 0; s < it.len; ++s) tn->grad[base + s * it.inner] += g;
      }
    }
  });
  return Tensor(out);
}

Tensor mean(const Tensor& t, int axis) {
  int ax = axis;
  if (ax < 0) ax += t.rank();
  const double inv = 1.0 / t.dim(ax);
  return mul(sum(t, ax), inv);
}

Tensor sum_all(const Tensor& t) {
  check_defined(t, "sum_all");
  const NodePtr tn = t.node();
  auto out = make_node({});
  double acc = 0.0;
  for (double v : tn->data) acc += v;
  out->data[0] = acc;
  attach(out, {tn}, [tn](const Node& o) {
    tn->ensure_grad();
    const double g = o.grad[0];
    for (std::size_t i = 0; i < tn->numel(); ++i) tn->grad[i] += g;
  });
  return Tensor(out);
}

Tensor mean_all(const Tensor& t) {
  return mul(sum_all(t), 1.0 / static_cast<double>(t.size()));
}

Tensor l1_norm(const Tensor& t) { return sum_all(abs(t)); }

Tensor l2_norm(const Tensor& t) {
  check_defined(t, "l2_norm");
  const NodePtr tn = t.node();
  auto out = make_node({});
  double acc = 0.0;
  for (double v : tn->data) acc += v * v;
  const double norm = std::sqrt(acc);
  out->data[0] = norm;
  attach(out, {tn}, [tn, norm](const Node& o) {
    tn->ensure_grad();
    if (norm == 0.0) return;  // subgradient 0 at the origin
    const double g = o.grad[0] / norm;
    for (std::size_t i = 0; i < tn->numel(); ++i) tn->grad[i] += g * tn->data[i];
  });
  return Tensor(out);
}

Tensor detach(const Tensor& t) {
  check_defined(t, "detach");
  return Tensor::from_data(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

double max_value(const Tensor& t) {
  check_defined(t, "max_value");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : t.data()) mx = std::max(mx, v);
  return mx;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace vitquant
