#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <set>

#include "mamt4/gradcheck.hpp"
#include "mamt4/tensor.hpp"
#include "support.hpp"

using namespace mamt4;
using mamt4::testing::error_kind;
using mamt4::testing::leaf;
using mamt4::testing::random_tensor;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("create fills and validates shapes") {
  CHECK(vals(Tensor::zeros({2, 2})) == std::vector<double>{0, 0, 0, 0});
  CHECK(vals(Tensor::constant({3}, 1.5)) == std::vector<double>{1.5, 1.5, 1.5});
  CHECK(vals(Tensor::ones({2})) == std::vector<double>{1, 1});

  auto a = Tensor::create({4}, init::Uniform{0, 1, 7});
  auto b = Tensor::create({4}, init::Uniform{0, 1, 7});
  CHECK(vals(a) == vals(b));
  CHECK_FALSE(a.requires_grad());
  auto g1 = Tensor::create({16}, init::Gaussian{0, 1, 3});
  auto g2 = Tensor::create({16}, init::Gaussian{0, 1, 3});
  CHECK(vals(g1) == vals(g2));

  CHECK(error_kind([] { Tensor::zeros({2, 0}); }) == ErrorKind::InvalidShape);
  CHECK(error_kind([] { Tensor::zeros({}); }) == ErrorKind::InvalidShape);
  CHECK(error_kind([] { Tensor::from({3}, {1, 2}); }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("elementwise binary ops") {
  auto a = Tensor::from({2}, {1, 2});
  auto b = Tensor::from({2}, {3, 4});
  CHECK(vals(a + b) == std::vector<double>{4, 6});
  CHECK(vals(a - b) == std::vector<double>{-2, -2});

  Rng rng(1);
  auto x = random_tensor({3, 4}, rng);
  CHECK(vals(x * Tensor::ones({3, 4})) == vals(x));

  CHECK(error_kind([&] { add(Tensor::zeros({2, 3}), Tensor::zeros({2})); }) == ErrorKind::ShapeMismatch);
  CHECK(error_kind([&] { mul(Tensor::zeros({3}), Tensor::zeros({2, 3})); }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("broadcast add and mul agree with a loop oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto rank = static_cast<std::size_t>(rng.integer(1, 3));
    Shape sa(rank);
    for (auto& d : sa) d = static_cast<std::size_t>(rng.integer(1, 4));
    const auto drop = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(rank) - 1));
    const Shape sb(sa.begin() + static_cast<std::ptrdiff_t>(drop), sa.end());
    auto a = random_tensor(sa, rng);
    auto b = random_tensor(sb, rng);
    auto sum_t = add(a, b);
    auto prod_t = mul(a, b);
    REQUIRE(sum_t.shape() == sa);
    const std::size_t nb = b.numel();
    for (std::size_t i = 0; i < a.numel(); ++i) {
      CHECK(sum_t[i] == a[i] + b[i % nb]);
      CHECK(prod_t[i] == a[i] * b[i % nb]);
    }
  }
}

TEST_CASE("unary ops") {
  CHECK(gelu(Tensor::scalar(0)).item() == 0.0);
  CHECK(sigmoid(Tensor::scalar(0)).item() == 0.5);
  const double x = 3.0;
  const double expected = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
  CHECK_THAT(gelu(Tensor::scalar(3)).item(), WithinAbs(expected, 1e-15));
  CHECK_THAT(gelu(Tensor::scalar(3)).item(), WithinAbs(2.9964, 1e-4));
  CHECK_THAT(exp(Tensor::scalar(1)).item(), WithinAbs(std::numbers::e, 1e-15));
  CHECK(neg(Tensor::scalar(2)).item() == -2.0);
  CHECK(error_kind([] { log(Tensor::from({2}, {1.0, 0.0})); }) == ErrorKind::DomainError);
  CHECK(error_kind([] { log(Tensor::scalar(-1)); }) == ErrorKind::DomainError);
}

TEST_CASE("matmul") {
  Rng rng(3);
  auto a = random_tensor({3, 3}, rng);
  auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(vals(matmul(eye, a)) == vals(a));

  auto m = matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {5, 6}));
  CHECK(m.shape() == Shape{2, 1});
  CHECK(vals(m) == std::vector<double>{17, 39});

  auto p = random_tensor({5, 4}, rng);
  auto q = random_tensor({4, 3}, rng);
  auto pq = matmul(p, q);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 4; ++k) acc += p[i * 4 + k] * q[k * 3 + j];
      CHECK_THAT(pq[i * 3 + j], WithinAbs(acc, 1e-12));
    }
  }

  auto bp = random_tensor({2, 3, 4}, rng);
  auto bq = random_tensor({2, 4, 2}, rng);
  auto bpq = matmul(bp, bq);
  REQUIRE(bpq.shape() == Shape{2, 3, 2});
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < 4; ++k) acc += bp[b * 12 + i * 4 + k] * bq[b * 8 + k * 2 + j];
        CHECK_THAT(bpq[b * 6 + i * 2 + j], WithinAbs(acc, 1e-12));
      }
    }
  }

  CHECK(error_kind([] { matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})); }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("reductions") {
  CHECK(sum(Tensor::from({3}, {1, 2, 3})).item() == 6.0);
  CHECK(mean(Tensor::constant({2, 5}, 0.25)).item() == 0.25);
  auto m = mean(Tensor::from({2, 2}, {1, 2, 3, 4}), 0);
  CHECK(m.shape() == Shape{2});
  CHECK(vals(m) == std::vector<double>{2, 3});
  CHECK(vals(sum(Tensor::from({2, 2}, {1, 2, 3, 4}), 1)) == std::vector<double>{3, 7});
  CHECK(error_kind([] { sum(Tensor::zeros({2, 2}), 2); }) == ErrorKind::InvalidAxis);
}

TEST_CASE("softmax") {
  auto u = softmax(Tensor::zeros({3}), 0);
  for (double v : u.values()) CHECK_THAT(v, WithinAbs(1.0 / 3.0, 1e-15));

  auto s = softmax(Tensor::from({3}, {1, 2, 3}), 0);
  CHECK_THAT(s[0], WithinAbs(0.0900, 1e-4));
  CHECK_THAT(s[1], WithinAbs(0.2447, 1e-4));
  CHECK_THAT(s[2], WithinAbs(0.6652, 1e-4));

  auto shifted = softmax(Tensor::from({2}, {0.3, 1.7}), 0);
  auto shifted2 = softmax(Tensor::from({2}, {100.3, 101.7}), 0);
  CHECK_THAT(shifted[0], WithinAbs(shifted2[0], 1e-12));

  Rng rng(4);
  auto big = random_tensor({6, 7}, rng, -1e4, 1e4);
  for (std::size_t axis : {0u, 1u}) {
    auto p = softmax(big, axis);
    const std::size_t rows = axis == 1 ? 6 : 7;
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < (axis == 1 ? 7u : 6u); ++c) {
        const double v = axis == 1 ? p[r * 7 + c] : p[c * 7 + r];
        CHECK(std::isfinite(v));
        total += v;
      }
      CHECK_THAT(total, WithinAbs(1.0, 1e-9));
    }
  }
}

TEST_CASE("layer norm") {
  auto ones = Tensor::ones({3});
  auto zeros = Tensor::zeros({3});
  auto flat = layer_norm(Tensor::constant({2, 3}, 4.0), ones, zeros);
  for (double v : flat.values()) CHECK(v == 0.0);

  Rng rng(5);
  auto bias = random_tensor({3}, rng);
  auto gone = layer_norm(random_tensor({2, 3}, rng), zeros, bias);
  for (std::size_t i = 0; i < 6; ++i) CHECK(gone[i] == bias[i % 3]);

  auto row = layer_norm(Tensor::from({3}, {1, 2, 3}), ones, zeros, 1e-12);
  CHECK_THAT(row[0], WithinAbs(-1.2247, 1e-4));
  CHECK_THAT(row[1], WithinAbs(0.0, 1e-12));
  CHECK_THAT(row[2], WithinAbs(1.2247, 1e-4));

  CHECK(error_kind([&] { layer_norm(Tensor::zeros({2, 4}), ones, zeros); }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("shape ops") {
  Rng rng(6);
  auto v = random_tensor({1536}, rng);
  auto tok = reshape(v, {8, 192});
  CHECK(tok.shape() == Shape{8, 192});
  CHECK(vals(tok) == vals(v));

  auto a = random_tensor({3, 5}, rng);
  CHECK(transpose2d(a).shape() == Shape{5, 3});
  CHECK(transpose2d(a)[1 * 3 + 2] == a[2 * 5 + 1]);
  CHECK(vals(transpose2d(transpose2d(a))) == vals(a));

  std::vector<Tensor> parts;
  for (int i = 0; i < 4; ++i) parts.push_back(random_tensor({8, 192}, rng));
  auto fused = concat(parts, 0);
  CHECK(fused.shape() == Shape{32, 192});
  CHECK(fused[8 * 192 * 3] == parts[3][0]);

  auto cols = concat({Tensor::from({2, 1}, {1, 2}), Tensor::from({2, 2}, {3, 4, 5, 6})}, 1);
  CHECK(vals(cols) == std::vector<double>{1, 3, 4, 2, 5, 6});
  CHECK(vals(slice(cols, 1, 1, 3)) == std::vector<double>{3, 4, 5, 6});
  CHECK(vals(slice(cols, 0, 1, 2)) == std::vector<double>{2, 5, 6});

  CHECK(error_kind([&] { reshape(v, {8, 191}); }) == ErrorKind::ShapeMismatch);
  CHECK(error_kind([&] { concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 4})}, 0); }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("backward on hand-derivable graphs") {
  auto x = Tensor::from({3}, {1, 2, 3});
  x.set_requires_grad(true);
  backward(sum(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});

  auto y = Tensor::from({2}, {1, 2});
  y.set_requires_grad(true);
  backward(sum(y * y));
  CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{2, 4});

  auto z = Tensor::scalar(0);
  z.set_requires_grad(true);
  backward(sigmoid(z));
  CHECK(z.grad()[0] == 0.25);

  CHECK(error_kind([&] { backward(y * y); }) == ErrorKind::NotScalar);
}

TEST_CASE("gradients accumulate until zero_grad") {
  auto x = Tensor::from({2}, {1, 2});
  x.set_requires_grad(true);
  backward(sum(x * x));
  backward(sum(x * x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{4, 8});
  x.zero_grad();
  CHECK((!x.has_grad() || (x.grad()[0] == 0 && x.grad()[1] == 0)));
}

TEST_CASE("a tensor feeding two consumers sums both contributions") {
  Rng rng(8);
  auto x = leaf({5}, rng);
  auto f = [](const Tensor& t) { return add(sum(t * t), sum(t)); };
  backward(f(x));
  for (std::size_t i = 0; i < 5; ++i) CHECK_THAT(x.grad()[i], WithinAbs(2 * x[i] + 1, 1e-14));
  x.zero_grad();
  CHECK(finite_diff_check(f, x).max_relative_error < 1e-8);
}

TEST_CASE("tensors without requires_grad never receive gradients") {
  Rng rng(9);
  auto w = leaf({3}, rng);
  auto c = random_tensor({3}, rng);
  backward(sum(w * c));
  CHECK(w.has_grad());
  CHECK_FALSE(c.has_grad());
  {
    NoGradGuard guard;
    auto out = w * w;
    CHECK(out.is_leaf());
    CHECK_FALSE(out.requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("tape is topological and visits each node once") {
  Rng rng(10);
  auto x = leaf({4}, rng);
  auto h = tanh(x);
  auto loss = sum(h * h + h);
  const Tape tape = build_tape(loss);
  std::set<const TensorImpl*> seen;
  for (const auto& impl : tape.order) {
    CHECK(seen.insert(impl.get()).second);
    if (impl->node) {
      for (const auto& in : impl->node->inputs) {
        if (in->requires_grad) CHECK(seen.count(in.get()) == 1);
      }
    }
  }
  CHECK(tape.order.back().get() == loss.impl().get());
}

TEST_CASE("identical operation sequences are bit-identical") {
  auto run = [] {
    auto w = Tensor::create({4, 3}, init::Gaussian{0, 1, 11});
    w.set_requires_grad(true);
    auto x = Tensor::create({2, 4}, init::Uniform{-1, 1, 12});
    auto out = mean(gelu(matmul(x, w)));
    backward(out);
    return std::make_pair(out.item(), std::vector<double>(w.grad().begin(), w.grad().end()));
  };
  CHECK(run() == run());
}

TEST_CASE("finite-difference oracle") {
  Rng rng(11);
  auto x = leaf({6}, rng);
  CHECK(finite_diff_check([](const Tensor& t) { return sum(t * t); }, x).max_relative_error < 1e-7);
  CHECK_FALSE(x.has_grad());

  auto g = Tensor::ones({6});
  auto b = Tensor::zeros({6});
  auto row = leaf({2, 6}, rng);
  CHECK(finite_diff_check([&](const Tensor& t) { return sum(mul(layer_norm(t, g, b), Tensor::from({6}, {1, 2, 3, 4, 5, 6}))); },
                          row)
            .max_relative_error < 1e-4);
}

TEST_CASE("gradient suite passes every case") {
  const auto cases = run_gradcheck_suite(7);
  REQUIRE(cases.size() > 40);
  for (const auto& c : cases) {
    INFO(c.name << " err=" << c.result.max_relative_error);
    CHECK(c.passed());
    CHECK(c.tolerance <= kCompositeTolerance);
    CHECK(c.elements > 0);
    CHECK(c.elements <= 64);
  }
}
