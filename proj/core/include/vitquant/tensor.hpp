#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vitquant {

namespace detail {
struct Node;
}

// Dense row-major f64 tensor with reverse-mode differentiation.
//
// A Tensor is a cheap shared handle onto a graph node. Operations allocate a
// fresh node holding the result; when any operand participates in gradient
// tracking, the node also records its operands and a backward rule. Calling
// backward() on a scalar walks the recorded graph in reverse topological
// order and accumulates d(loss)/d(leaf) additively into each tracked leaf.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  int dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::size_t size() const;  // element count

  std::span<const double> data() const;
  // Raw write access; meant for leaves (optimizer steps, weight loading).
  std::span<double> mutable_data();

  bool requires_grad() const;
  void set_requires_grad(bool value);  // leaves only
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  double item() const;  // single-element tensors

  // Value copy detached from any graph.
  Tensor clone(bool requires_grad = false) const;

  // Reverse-mode pass from a scalar. Rejects a second call on the same
  // result; gradients from separate backward roots accumulate.
  void backward() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---- elementwise arithmetic (numpy-style right-aligned broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, double c);
Tensor mul(const Tensor& a, double c);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return mul(a, 1.0 / c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- elementwise functions ----
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // requires strictly positive input
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor gelu(const Tensor& a);

// Custom differentiable elementwise map: f is the forward value,
// dfdx the derivative evaluated at the *input*.
Tensor elementwise_unary(const Tensor& a, std::function<double(double)> f,
                         std::function<double(double)> dfdx);

// ---- linear algebra ----
// a: [..., m, k] x b: [k, n] or [..., k, n] with identical leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- normalization ----
Tensor softmax(const Tensor& x, int axis);
// Last-axis layer normalization; gain/bias have shape [last_dim].
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// ---- shape manipulation (all produce fresh nodes; gradients flow) ----
Tensor reshape(const Tensor& t, std::vector<int> shape);
Tensor permute(const Tensor& t, const std::vector<int>& axes);
Tensor transpose(const Tensor& t);  // rank-2 convenience
Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(const Tensor& t, int axis, int sections);
Tensor narrow(const Tensor& t, int axis, int start, int length);
Tensor select(const Tensor& t, int axis, int index);  // drops the axis
Tensor index_select(const Tensor& t, int axis, const std::vector<int>& indices);

// ---- reductions ----
Tensor sum(const Tensor& t, int axis);
Tensor mean(const Tensor& t, int axis);
Tensor sum_all(const Tensor& t);
Tensor mean_all(const Tensor& t);
Tensor l1_norm(const Tensor& t);
Tensor l2_norm(const Tensor& t);

// Constant copy: same values, no graph link, never tracked.
Tensor detach(const Tensor& t);

// Largest element (plain value, not differentiable).
double max_value(const Tensor& t);

bool all_finite(const Tensor& t);

std::string shape_str(const std::vector<int>& shape);

}  // namespace vitquant
