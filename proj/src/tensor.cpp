#include "mamt4/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "mamt4/kernels.hpp"
#include "mamt4/rng.hpp"

namespace mamt4 {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidShape: return "InvalidShape";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DomainError: return "DomainError";
    case ErrorKind::InvalidAxis: return "InvalidAxis";
    case ErrorKind::NotScalar: return "NotScalar";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::InvalidCounts: return "InvalidCounts";
    case ErrorKind::UndefinedMetric: return "UndefinedMetric";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::InvalidLabel: return "InvalidLabel";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::DuplicateView: return "DuplicateView";
    case ErrorKind::MissingView: return "MissingView";
    case ErrorKind::MissingGradient: return "MissingGradient";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  if (shape.empty()) throw Error(ErrorKind::InvalidShape, "shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw Error(ErrorKind::InvalidShape, "zero dimension in " + shape_str(shape));
  }
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> values) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  return impl;
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t n = 1;
  for (std::size_t i = from; i < to; ++i) n *= s[i];
  return n;
}

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::create(const Shape& shape, const Init& how) {
  check_shape(shape);
  std::vector<double> values(shape_numel(shape), 0.0);
  std::visit(
      [&](const auto& spec) {
        using T = std::decay_t<decltype(spec)>;
        if constexpr (std::is_same_v<T, init::Ones>) {
          std::fill(values.begin(), values.end(), 1.0);
        } else if constexpr (std::is_same_v<T, init::Constant>) {
          std::fill(values.begin(), values.end(), spec.value);
        } else if constexpr (std::is_same_v<T, init::Uniform>) {
          Rng rng(spec.seed);
          for (auto& v : values) v = rng.uniform(spec.lo, spec.hi);
        } else if constexpr (std::is_same_v<T, init::Gaussian>) {
          Rng rng(spec.seed);
          for (auto& v : values) v = rng.gaussian(spec.mu, spec.sigma);
        }
      },
      how);
  return Tensor(make_impl(shape, std::move(values)));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw Error(ErrorKind::ShapeMismatch, "shape " + shape_str(shape) + " does not hold " +
                                              std::to_string(values.size()) + " values");
  }
  return Tensor(make_impl(shape, std::move(values)));
}

double Tensor::item() const {
  if (numel() != 1) throw Error(ErrorKind::NotScalar, "item() on tensor of shape " + shape_str(shape()));
  return impl_->values[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw Error(ErrorKind::InvalidConfig, "requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  if (!on) {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
  return *this;
}

void Tensor::zero_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return Tensor(make_impl(impl_->shape, impl_->values)); }

// ---------------------------------------------------------------------------
// Grad mode and recording

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

Tensor record(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
              BackwardFn backward, const char* op) {
  auto impl = make_impl(std::move(shape), std::move(values));
  if (g_grad_enabled) {
    std::vector<std::shared_ptr<TensorImpl>> tracked;
    for (const auto& in : inputs) {
      if (in.requires_grad()) tracked.push_back(in.impl());
    }
    if (!tracked.empty()) {
      auto node = std::make_shared<Node>();
      node->inputs = std::move(tracked);
      node->backward = std::move(backward);
      node->op = op;
      impl->requires_grad = true;
      impl->node = std::move(node);
    }
  }
  return Tensor(std::move(impl));
}

std::span<double> grad_sink(const Tensor& t) {
  auto& impl = *t.impl();
  if (!impl.requires_grad) return {};
  if (impl.grad.empty()) impl.grad.assign(impl.values.size(), 0.0);
  return impl.grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape and backward

Tape build_tape(const Tensor& root) {
  Tape tape;
  if (!root.requires_grad()) return tape;
  std::unordered_set<const TensorImpl*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto* node = impl->node.get();
    if (node != nullptr && next < node->inputs.size()) {
      auto child = node->inputs[next++];
      if (visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
      continue;
    }
    tape.order.push_back(impl);
    stack.pop_back();
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw Error(ErrorKind::NotScalar, "backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw Error(ErrorKind::InvalidConfig, "loss does not depend on any tensor requiring gradients");
  }
  Tape tape = build_tape(loss);
  for (auto& impl : tape.order) {
    if (impl->node) impl->grad.assign(impl->values.size(), 0.0);
  }
  auto root = loss.impl();
  if (root->grad.empty()) root->grad.assign(1, 0.0);
  root->grad[0] += 1.0;
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    auto& impl = *it;
    if (impl->node) {
      impl->node->backward(impl->grad);
      // Intermediate gradients are not retained.
      std::vector<double>().swap(impl->grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor elementwise_binary(BinaryOp op, const Tensor& a, const Tensor& b) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw Error(ErrorKind::ShapeMismatch,
                "cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t inner = b.numel();
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(n);
  switch (op) {
    case BinaryOp::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % inner];
      break;
    case BinaryOp::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i % inner];
      break;
    case BinaryOp::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % inner];
      break;
  }
  return detail::record(
      a.shape(), std::move(out), {a, b},
      [a, b, op, n, inner](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        auto gb = detail::grad_sink(b);
        const auto& av = a.data();
        const auto& bv = b.data();
        if (!ga.empty()) {
          switch (op) {
            case BinaryOp::Add:
            case BinaryOp::Sub:
              for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
              break;
            case BinaryOp::Mul:
              for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i % inner];
              break;
          }
        }
        if (!gb.empty()) {
          switch (op) {
            case BinaryOp::Add:
              for (std::size_t i = 0; i < n; ++i) gb[i % inner] += g[i];
              break;
            case BinaryOp::Sub:
              for (std::size_t i = 0; i < n; ++i) gb[i % inner] -= g[i];
              break;
            case BinaryOp::Mul:
              for (std::size_t i = 0; i < n; ++i) gb[i % inner] += g[i] * av[i];
              break;
          }
        }
      },
      "binary");
}

double gelu_value(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const double inner = k * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_derivative(double x) {
  constexpr double k = 0.7978845608028654;
  const double inner = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

namespace {

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor elementwise_unary(UnaryOp op, const Tensor& a) {
  const auto& av = a.data();
  const std::size_t n = av.size();
  std::vector<double> out(n);
  switch (op) {
    case UnaryOp::Neg:
      for (std::size_t i = 0; i < n; ++i) out[i] = -av[i];
      break;
    case UnaryOp::Exp:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(av[i]);
      break;
    case UnaryOp::Log:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(av[i] > 0.0)) {
          throw Error(ErrorKind::DomainError, "log of non-positive value " + std::to_string(av[i]));
        }
        out[i] = std::log(av[i]);
      }
      break;
    case UnaryOp::Sigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = stable_sigmoid(av[i]);
      break;
    case UnaryOp::Gelu:
      for (std::size_t i = 0; i < n; ++i) out[i] = gelu_value(av[i]);
      break;
    case UnaryOp::Tanh:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(av[i]);
      break;
  }
  // Sigmoid, exp and tanh derivatives are expressed through the output.
  auto result_values = std::make_shared<std::vector<double>>(out);
  return detail::record(
      a.shape(), std::move(out), {a},
      [a, op, n, result_values](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        if (ga.empty()) return;
        const auto& av = a.data();
        const auto& y = *result_values;
        for (std::size_t i = 0; i < n; ++i) {
          double d = 0.0;
          switch (op) {
            case UnaryOp::Neg: d = -1.0; break;
            case UnaryOp::Exp: d = y[i]; break;
            case UnaryOp::Log: d = 1.0 / av[i]; break;
            case UnaryOp::Sigmoid: d = y[i] * (1.0 - y[i]); break;
            case UnaryOp::Gelu: d = gelu_derivative(av[i]); break;
            case UnaryOp::Tanh: d = 1.0 - y[i] * y[i]; break;
          }
          ga[i] += g[i] * d;
        }
      },
      "unary");
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= c;
  return detail::record(
      a.shape(), std::move(out), {a},
      [a, c](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * g[i];
      },
      "scale");
}

// ---------------------------------------------------------------------------
// Matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw Error(ErrorKind::ShapeMismatch, "matmul needs rank >= 2 operands, got " +
                                              shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto& as = a.shape();
  const auto& bs = b.shape();
  std::size_t batch = 1;
  std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t n = bs.back();
  Shape out_shape;
  if (bs.size() == 2) {
    // Leading dims of a fold into rows.
    m = prod(as, 0, as.size() - 1);
    out_shape.assign(as.begin(), as.end() - 1);
    out_shape.push_back(n);
  } else {
    if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
      throw Error(ErrorKind::ShapeMismatch, "batched matmul leading dims differ: " + shape_str(as) +
                                                " vs " + shape_str(bs));
    }
    batch = prod(as, 0, as.size() - 2);
    out_shape.assign(as.begin(), as.end() - 1);
    out_shape.push_back(n);
  }
  if (bs[bs.size() - 2] != k) {
    throw Error(ErrorKind::ShapeMismatch,
                "matmul inner dims differ: " + shape_str(as) + " x " + shape_str(bs));
  }
  std::vector<double> out(batch * m * n);
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  for (std::size_t t = 0; t < batch; ++t) {
    kernels::gemm_nn(m, n, k, ap + t * m * k, bp + t * k * n, out.data() + t * m * n, false);
  }
  return detail::record(
      std::move(out_shape), std::move(out), {a, b},
      [a, b, batch, m, n, k](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        auto gb = detail::grad_sink(b);
        const double* ap = a.data().data();
        const double* bp = b.data().data();
        for (std::size_t t = 0; t < batch; ++t) {
          const double* gt = g.data() + t * m * n;
          if (!ga.empty()) kernels::gemm_nt_acc(m, k, n, gt, bp + t * k * n, ga.data() + t * m * k);
          if (!gb.empty()) kernels::gemm_tn_acc(k, n, m, ap + t * m * k, gt, gb.data() + t * k * n);
        }
      },
      "matmul");
}

// ---------------------------------------------------------------------------
// Reductions

Tensor reduce(ReduceOp op, const Tensor& a) {
  const std::size_t n = a.numel();
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double factor = op == ReduceOp::Mean ? 1.0 / static_cast<double>(n) : 1.0;
  return detail::record(
      {1}, {s * factor}, {a},
      [a, factor](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        for (auto& v : ga) v += g[0] * factor;
      },
      "reduce");
}

Tensor reduce(ReduceOp op, const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw Error(ErrorKind::InvalidAxis,
                "axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  }
  const auto& s = a.shape();
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t len = s[axis];
  const std::size_t inner = prod(s, axis + 1, s.size());
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const double factor = op == ReduceOp::Mean ? 1.0 / static_cast<double>(len) : 1.0;
  std::vector<double> out(outer * inner, 0.0);
  const auto& av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = av.data() + (o * len + l) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  for (auto& v : out) v *= factor;
  return detail::record(
      std::move(out_shape), std::move(out), {a},
      [a, outer, len, inner, factor](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        if (ga.empty()) return;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t l = 0; l < len; ++l) {
            double* dst = ga.data() + (o * len + l) * inner;
            const double* src = g.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * factor;
          }
        }
      },
      "reduce_axis");
}

// ---------------------------------------------------------------------------
// Softmax

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw Error(ErrorKind::InvalidAxis,
                "axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  }
  const auto& s = a.shape();
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t len = s[axis];
  const std::size_t inner = prod(s, axis + 1, s.size());
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = av[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, av[base + l * inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(av[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= total;
    }
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return detail::record(
      s, std::move(out), {a},
      [a, y, outer, len, inner](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        if (ga.empty()) return;
        const auto& yv = *y;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            double dotp = 0.0;
            for (std::size_t l = 0; l < len; ++l) dotp += g[base + l * inner] * yv[base + l * inner];
            for (std::size_t l = 0; l < len; ++l) {
              const std::size_t idx = base + l * inner;
              ga[idx] += yv[idx] * (g[idx] - dotp);
            }
          }
        }
      },
      "softmax");
}

// ---------------------------------------------------------------------------
// Layer norm

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t width = a.shape().back();
  if (gain.numel() != width || bias.numel() != width) {
    throw Error(ErrorKind::ShapeMismatch, "layer_norm gain/bias length must equal last axis " +
                                              std::to_string(width));
  }
  if (!(eps > 0.0)) throw Error(ErrorKind::InvalidConfig, "layer_norm eps must be positive");
  const std::size_t rows = a.numel() / width;
  const auto& av = a.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  auto xhat = std::make_shared<std::vector<double>>(av.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += x[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(width);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < width; ++j) {
      const double xh = (x[j] - mu) * rs;
      (*xhat)[r * width + j] = xh;
      out[r * width + j] = gv[j] * xh + bv[j];
    }
  }
  return detail::record(
      a.shape(), std::move(out), {a, gain, bias},
      [a, gain, bias, xhat, rstd, rows, width](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        auto ggain = detail::grad_sink(gain);
        auto gbias = detail::grad_sink(bias);
        const auto& gv = gain.data();
        const auto& xh = *xhat;
        std::vector<double> dxhat(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * width;
          const double* xr = xh.data() + r * width;
          if (!ggain.empty()) {
            for (std::size_t j = 0; j < width; ++j) ggain[j] += gr[j] * xr[j];
          }
          if (!gbias.empty()) {
            for (std::size_t j = 0; j < width; ++j) gbias[j] += gr[j];
          }
          if (ga.empty()) continue;
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            dxhat[j] = gr[j] * gv[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xr[j];
          }
          mean_d /= static_cast<double>(width);
          mean_dx /= static_cast<double>(width);
          const double rs = (*rstd)[r];
          for (std::size_t j = 0; j < width; ++j) {
            ga[r * width + j] += rs * (dxhat[j] - mean_d - xr[j] * mean_dx);
          }
        }
      },
      "layer_norm");
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, const Shape& shape) {
  check_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    throw Error(ErrorKind::ShapeMismatch,
                "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return detail::record(
      shape, a.data(), {a},
      [a](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      },
      "reshape");
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw Error(ErrorKind::ShapeMismatch, "transpose2d needs rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0);
  const std::size_t c = a.dim(1);
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  }
  return detail::record(
      {c, r}, std::move(out), {a},
      [a, r, c](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        if (ga.empty()) return;
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
        }
      },
      "transpose2d");
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw Error(ErrorKind::InvalidShape, "concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw Error(ErrorKind::InvalidAxis, "concat axis " + std::to_string(axis) + " out of range");
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw Error(ErrorKind::ShapeMismatch,
                  "concat operands disagree: " + shape_str(first) + " vs " + shape_str(s));
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = prod(first, 0, axis);
  const std::size_t inner = prod(first, axis + 1, first.size());
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<double> out(outer * out_row);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * inner;
    const auto& pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * out_row + offset);
    }
    offset += chunk;
  }
  return detail::record(
      std::move(out_shape), std::move(out), parts,
      [parts, offsets, outer, inner, out_row, axis](std::span<const double> g) {
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
          auto gp = detail::grad_sink(parts[pi]);
          if (gp.empty()) continue;
          const std::size_t chunk = parts[pi].dim(axis) * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data() + o * out_row + offsets[pi];
            double* dst = gp.data() + o * chunk;
            for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
      },
      "concat");
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank()) {
    throw Error(ErrorKind::InvalidAxis, "slice axis " + std::to_string(axis) + " out of range");
  }
  if (begin >= end || end > a.dim(axis)) {
    throw Error(ErrorKind::InvalidShape, "slice range [" + std::to_string(begin) + "," +
                                             std::to_string(end) + ") invalid for " + shape_str(a.shape()));
  }
  const auto& s = a.shape();
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t inner = prod(s, axis + 1, s.size());
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_row = (end - begin) * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  std::vector<double> out(outer * out_row);
  const auto& av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data() + o * in_row + begin * inner, out_row, out.data() + o * out_row);
  }
  return detail::record(
      std::move(out_shape), std::move(out), {a},
      [a, outer, inner, in_row, out_row, begin](std::span<const double> g) {
        auto ga = detail::grad_sink(a);
        if (ga.empty()) return;
        for (std::size_t o = 0; o < outer; ++o) {
          double* dst = ga.data() + o * in_row + begin * inner;
          const double* src = g.data() + o * out_row;
          for (std::size_t i = 0; i < out_row; ++i) dst[i] += src[i];
        }
      },
      "slice");
}

// ---------------------------------------------------------------------------
// Finite differences

GradCheckResult finite_diff_check(const ScalarFn& f, Tensor x, double h) {
  if (!x.is_leaf()) throw Error(ErrorKind::InvalidConfig, "finite_diff_check needs a leaf tensor");
  if (!(h > 0.0)) throw Error(ErrorKind::InvalidConfig, "finite_diff_check step must be positive");
  const bool was_tracking = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor y = f(x);
  backward(y);
  std::vector<double> analytic = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                              : std::vector<double>(x.numel(), 0.0);
  x.zero_grad();

  GradCheckResult result;
  {
    NoGradGuard guard;
    auto vals = x.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = f(x).item();
      vals[i] = orig - h;
      const double fm = f(x).item();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      if (i == 0 || err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
  }
  x.set_requires_grad(was_tracking);
  return result;
}

}  // namespace mamt4
