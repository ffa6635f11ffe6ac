#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Results of differentiable
// operations keep a Node that references their inputs and a local backward
// rule; backward() orders those nodes topologically and runs each rule once.
// Values are 64-bit throughout.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mamt4/error.hpp"

namespace mamt4 {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// Receives the gradient of the node's output and accumulates into inputs.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  const char* op = "";
};

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves
};

namespace init {
struct Zeros {};
struct Ones {};
struct Constant {
  double value;
};
struct Uniform {
  double lo;
  double hi;
  std::uint64_t seed;
};
struct Gaussian {
  double mu;
  double sigma;
  std::uint64_t seed;
};
}  // namespace init

using Init = std::variant<init::Zeros, init::Ones, init::Constant, init::Uniform, init::Gaussian>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor create(const Shape& shape, const Init& how = init::Zeros{});
  static Tensor zeros(const Shape& shape) { return create(shape, init::Zeros{}); }
  static Tensor ones(const Shape& shape) { return create(shape, init::Ones{}); }
  static Tensor constant(const Shape& shape, double c) { return create(shape, init::Constant{c}); }
  static Tensor from(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->values.size(); }

  std::span<const double> values() const { return impl_->values; }
  // Direct write access; intended for leaves (initialization, optimizers,
  // finite-difference perturbation). Mutating a tensor that is an input of a
  // live graph invalidates that graph.
  std::span<double> mutable_values() { return impl_->values; }
  const std::vector<double>& data() const { return impl_->values; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->values[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  // Only leaves may toggle this; clears any existing gradient when disabled.
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl_->node == nullptr; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad();

  // New leaf with copied values and no graph history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Gradient mode

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Builds an op result. When gradients are enabled and any input requires
// them, the result joins the graph with `backward` as its local rule.
Tensor record(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
              BackwardFn backward, const char* op);

// Gradient buffer of t for accumulation, allocated on first use.
// Returns an empty span when t does not take gradients.
std::span<double> grad_sink(const Tensor& t);

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape

struct Tape {
  // Topological order: every node's inputs precede it. Only tensors that
  // require gradients appear.
  std::vector<std::shared_ptr<TensorImpl>> order;
};

Tape build_tape(const Tensor& root);

// Accumulates dLoss/dLeaf into every requires_grad leaf reachable from loss.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations

enum class BinaryOp { Add, Sub, Mul };
enum class UnaryOp { Neg, Exp, Log, Sigmoid, Gelu, Tanh };
enum class ReduceOp { Sum, Mean };

// b must equal a's shape or a trailing suffix of it (bias-style broadcast).
Tensor elementwise_binary(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor elementwise_unary(UnaryOp op, const Tensor& a);

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary(BinaryOp::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary(BinaryOp::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary(BinaryOp::Mul, a, b); }
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor neg(const Tensor& a) { return elementwise_unary(UnaryOp::Neg, a); }
inline Tensor exp(const Tensor& a) { return elementwise_unary(UnaryOp::Exp, a); }
inline Tensor log(const Tensor& a) { return elementwise_unary(UnaryOp::Log, a); }
inline Tensor sigmoid(const Tensor& a) { return elementwise_unary(UnaryOp::Sigmoid, a); }
inline Tensor gelu(const Tensor& a) { return elementwise_unary(UnaryOp::Gelu, a); }
inline Tensor tanh(const Tensor& a) { return elementwise_unary(UnaryOp::Tanh, a); }

Tensor scale(const Tensor& a, double c);

// tanh approximation of GELU, scalar form.
double gelu_value(double x);
double gelu_derivative(double x);

// [m,k]x[k,n] -> [m,n], or batched [..., m,k]x[..., k,n] with equal leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reduce(ReduceOp op, const Tensor& a);
Tensor reduce(ReduceOp op, const Tensor& a, std::size_t axis);
inline Tensor sum(const Tensor& a) { return reduce(ReduceOp::Sum, a); }
inline Tensor mean(const Tensor& a) { return reduce(ReduceOp::Mean, a); }
inline Tensor sum(const Tensor& a, std::size_t axis) { return reduce(ReduceOp::Sum, a, axis); }
inline Tensor mean(const Tensor& a, std::size_t axis) { return reduce(ReduceOp::Mean, a, axis); }

Tensor softmax(const Tensor& a, std::size_t axis);

// Normalizes over the last axis; gain and bias have the last axis' length.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor transpose2d(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

// ---------------------------------------------------------------------------
// Finite-difference oracle

using ScalarFn = std::function<Tensor(const Tensor&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central differences per coordinate of x against backward(). x must be a
// leaf; its gradient state is restored to empty afterwards. The relative
// error uses max(1, |analytic|) as denominator.
GradCheckResult finite_diff_check(const ScalarFn& f, Tensor x, double h = 1e-5);

}  // namespace mamt4
