#include "mamt4/gradcheck.hpp"

#include "mamt4/layers.hpp"
#include "mamt4/loss_metrics.hpp"
#include "mamt4/models.hpp"
#include "mamt4/rng.hpp"

namespace mamt4 {

namespace {

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : seed_(seed) {}

  Tensor random(const Shape& shape, double lo = -1.0, double hi = 1.0) {
    return Tensor::create(shape, init::Uniform{lo, hi, derive_seed({seed_, counter_++})});
  }

  // Reduces any output to a scalar through fixed random weights so every
  // output element contributes with a distinct coefficient.
  Tensor probe(const Tensor& out) {
    const Tensor w = Tensor::create(out.shape(), init::Uniform{-1.0, 1.0, derive_seed({seed_, 0xbeef, out.numel()})});
    return sum(mul(out, w));
  }

  void check(const std::string& name, double tol, Tensor x, const ScalarFn& f) {
    const std::size_t n = x.numel();
    cases_.push_back({name, tol, n, finite_diff_check(f, std::move(x))});
  }

  std::vector<GradCheckCase> take() { return std::move(cases_); }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::vector<GradCheckCase> cases_;
};

void elementwise_cases(Suite& s) {
  const Tensor a = s.random({4, 6});
  const Tensor b = s.random({4, 6});
  const Tensor row = s.random({6});
  s.check("add/a", kSmoothTolerance, a, [&](const Tensor& x) { return s.probe(add(x, b)); });
  s.check("add/broadcast", kSmoothTolerance, row, [&](const Tensor& x) { return s.probe(add(a, x)); });
  s.check("sub/b", kSmoothTolerance, b, [&](const Tensor& x) { return s.probe(sub(a, x)); });
  s.check("mul/a", kSmoothTolerance, a, [&](const Tensor& x) { return s.probe(mul(x, b)); });
  s.check("mul/broadcast", kSmoothTolerance, row, [&](const Tensor& x) { return s.probe(mul(a, x)); });
  s.check("neg", kSmoothTolerance, a, [&](const Tensor& x) { return s.probe(neg(x)); });
  s.check("exp", kSmoothTolerance, a, [&](const Tensor& x) { return s.probe(exp(x)); });
  s.check("log", kSmoothTolerance, s.random({4, 6}, 0.5, 2.0), [&](const Tensor& x) { return s.probe(log(x)); });
  s.check("sigmoid", kSmoothTolerance, a, [&](const Tensor& x) { return s.probe(sigmoid(x)); });
  s.check("tanh", kSmoothTolerance, a, [&](const Tensor& x) { return s.probe(tanh(x)); });
  s.check("gelu", kSmoothTolerance, s.random({4, 6}, -3.0, 3.0), [&](const Tensor& x) { return s.probe(gelu(x)); });
  s.check("scale", kSmoothTolerance, a, [&](const Tensor& x) { return s.probe(scale(x, -2.5)); });
}

void structural_cases(Suite& s) {
  const Tensor a = s.random({3, 4});
  const Tensor b = s.random({4, 5});
  const Tensor batch = s.random({2, 3, 4});
  const Tensor batch_rhs = s.random({2, 4, 3});
  s.check("matmul/a", kSmoothTolerance, a, [&](const Tensor& x) { return s.probe(matmul(x, b)); });
  s.check("matmul/b", kSmoothTolerance, b, [&](const Tensor& x) { return s.probe(matmul(a, x)); });
  s.check("matmul/batched", kSmoothTolerance, batch,
          [&](const Tensor& x) { return s.probe(matmul(x, batch_rhs)); });
  s.check("sum", kSmoothTolerance, a, [&](const Tensor& x) { return sum(mul(x, x)); });
  s.check("mean/axis0", kSmoothTolerance, batch, [&](const Tensor& x) { return s.probe(mean(x, 0)); });
  s.check("sum/axis2", kSmoothTolerance, batch, [&](const Tensor& x) { return s.probe(sum(x, 2)); });
  s.check("softmax/last", kSmoothTolerance, batch, [&](const Tensor& x) { return s.probe(softmax(x, 2)); });
  s.check("softmax/first", kSmoothTolerance, batch, [&](const Tensor& x) { return s.probe(softmax(x, 0)); });
  const Tensor gain = s.random({4}, 0.5, 1.5);
  const Tensor bias = s.random({4});
  s.check("layer_norm/x", kSmoothTolerance, batch,
          [&](const Tensor& x) { return s.probe(layer_norm(x, gain, bias)); });
  s.check("layer_norm/gain", kSmoothTolerance, gain,
          [&](const Tensor& x) { return s.probe(layer_norm(batch, x, bias)); });
  s.check("layer_norm/bias", kSmoothTolerance, bias,
          [&](const Tensor& x) { return s.probe(layer_norm(batch, gain, x)); });
  s.check("reshape", kSmoothTolerance, batch, [&](const Tensor& x) { return s.probe(reshape(x, {6, 4})); });
  s.check("transpose2d", kSmoothTolerance, a, [&](const Tensor& x) { return s.probe(transpose2d(x)); });
  s.check("concat", kSmoothTolerance, a, [&](const Tensor& x) { return s.probe(concat({x, a, x}, 1)); });
  s.check("slice", kSmoothTolerance, batch, [&](const Tensor& x) { return s.probe(slice(x, 2, 1, 3)); });
}

void layer_cases(Suite& s) {
  const Tensor x = s.random({5, 6});
  const Tensor w = s.random({6, 3});
  const Tensor bias = s.random({3});
  s.check("linear/x", kSmoothTolerance, x, [&](const Tensor& t) { return s.probe(linear(t, w, bias)); });
  s.check("linear/weight", kSmoothTolerance, w, [&](const Tensor& t) { return s.probe(linear(x, t, bias)); });
  s.check("linear/bias", kSmoothTolerance, bias, [&](const Tensor& t) { return s.probe(linear(x, w, t)); });

  const Tensor img = s.random({2, 5, 5});
  const Tensor k = s.random({3, 2, 3, 3});
  const Tensor kb = s.random({3});
  s.check("conv2d/x", kSmoothTolerance, img, [&](const Tensor& t) { return s.probe(conv2d(t, k, kb)); });
  s.check("conv2d/kernels", kSmoothTolerance, k, [&](const Tensor& t) { return s.probe(conv2d(img, t, kb)); });
  s.check("conv2d/bias", kSmoothTolerance, kb, [&](const Tensor& t) { return s.probe(conv2d(img, k, t)); });
  s.check("conv2d/stride2_valid", kSmoothTolerance, img,
          [&](const Tensor& t) { return s.probe(conv2d(t, k, kb, 2, Padding::Valid)); });

  const Tensor grid = s.random({2, 4, 6});
  s.check("pool2d/max", kCompositeTolerance, grid, [&](const Tensor& t) { return s.probe(pool2d(PoolOp::Max, t, 2, 2)); });
  s.check("pool2d/avg", kSmoothTolerance, grid, [&](const Tensor& t) { return s.probe(pool2d(PoolOp::Avg, t, 2, 2)); });
  s.check("global_avg_pool", kSmoothTolerance, grid, [&](const Tensor& t) { return s.probe(global_avg_pool(t)); });
  s.check("upsample_nearest", kSmoothTolerance, s.random({2, 3, 3}),
          [&](const Tensor& t) { return s.probe(upsample_nearest(t, 2)); });
}

void attention_cases(Suite& s, std::uint64_t seed) {
  TEConfig cfg{1, 2, 8, 16, 1e-5};
  ParameterSet params;
  ParamBuilder pb(params, derive_seed({seed, 0x7e}));
  const TeBlockParams block = make_te_block(pb, "te", cfg);
  // Non-trivial layer-norm affine terms.
  for (auto& p : params.items()) {
    if (p.name.find(".ln") == std::string::npos) continue;
    auto v = p.tensor.mutable_values();
    Rng rng(derive_seed({seed, v.size(), p.name.size()}));
    for (auto& e : v) e += rng.uniform(-0.3, 0.3);
  }
  const Tensor tokens = s.random({5, 8});
  const Tensor q = s.random({5, 8});
  const Tensor kk = s.random({5, 8});
  const Tensor v = s.random({5, 8});
  s.check("attention/q", kSmoothTolerance, q, [&](const Tensor& t) { return s.probe(multi_head_attention(t, kk, v, 2)); });
  s.check("attention/k", kSmoothTolerance, kk, [&](const Tensor& t) { return s.probe(multi_head_attention(q, t, v, 2)); });
  s.check("attention/v", kSmoothTolerance, v, [&](const Tensor& t) { return s.probe(multi_head_attention(q, kk, t, 2)); });
  s.check("msa/x", kCompositeTolerance, tokens, [&](const Tensor& t) { return s.probe(msa(t, block.attn, 2)); });
  s.check("msa/w_q", kCompositeTolerance, block.attn.w_q, [&](const Tensor&) { return s.probe(msa(tokens, block.attn, 2)); });
  s.check("mlp/x", kCompositeTolerance, tokens, [&](const Tensor& t) { return s.probe(mlp(t, block.mlp)); });
  s.check("te_block/x", kCompositeTolerance, tokens, [&](const Tensor& t) { return s.probe(te_block(t, block, cfg)); });
  s.check("te_block/ln1.gain", kCompositeTolerance, block.ln1.gain,
          [&](const Tensor&) { return s.probe(te_block(tokens, block, cfg)); });
  s.check("te_block/w_v", kCompositeTolerance, block.attn.w_v,
          [&](const Tensor&) { return s.probe(te_block(tokens, block, cfg)); });
  params.zero_grad();
}

void loss_cases(Suite& s) {
  const Tensor logits = s.random({8}, -3.0, 3.0);
  const std::vector<Label> labels{Label::Cancer, Label::Normal, Label::Normal, Label::Cancer,
                                  Label::Normal, Label::Normal, Label::Cancer, Label::Normal};
  for (const double gamma : {0.0, 0.5, 2.0}) {
    const FocalConfig cfg{0.95, gamma};
    s.check("focal_loss/gamma=" + std::to_string(gamma).substr(0, 3), kSmoothTolerance, logits,
            [&](const Tensor& t) { return focal_loss(t, labels, cfg); });
  }
  const std::vector<double> targets{0.0, 1.0, 0.3, 1.0, 0.0, 0.7, 1.0, 0.0};
  s.check("bce_with_logits", kSmoothTolerance, logits, [&](const Tensor& t) { return bce_with_logits(t, targets); });
}

void model_cases(Suite& s, std::uint64_t seed) {
  // Single-channel 8x8 image through a two-stage backbone, 64 inputs.
  const BackboneConfig tiny{{4, 6}, 8, 8, 1, 3};
  SingleViewModel sv(tiny, derive_seed({seed, 0x5f}));
  const Tensor image = s.random({1, 8, 8}, 0.0, 1.0);
  const FocalConfig focal{};
  s.check("single_view/image", kCompositeTolerance, image,
          [&](const Tensor& t) { return focal_loss(sv.logit(t), Label::Cancer, focal); });
  s.check("single_view/head.weight", kCompositeTolerance, sv.head().weight,
          [&](const Tensor&) { return focal_loss(sv.logit(image), Label::Normal, focal); });
  s.check("single_view/stage0.bias", kCompositeTolerance, sv.state().params.at("backbone.stage0.bias").tensor,
          [&](const Tensor&) { return focal_loss(sv.logit(image), Label::Cancer, focal); });
  sv.state().params.zero_grad();

  const BackboneConfig fb{{4, 6}, 16, 8, 3, 3};
  MamT4Config mc{2, 4, 16, TEConfig{2, 2, 8, 16, 1e-5}};
  MamT4Model mm(fb, mc, derive_seed({seed, 0x34}));
  for (auto* t : {&mm.state().params.at("mamt4.pos_embed").tensor, &mm.state().params.at("mamt4.class_token").tensor}) {
    Rng rng(derive_seed({seed, t->numel()}));
    for (auto& e : t->mutable_values()) e = rng.uniform(-0.5, 0.5);
  }
  std::vector<Tensor> views;
  for (int v = 0; v < 4; ++v) views.push_back(s.random({16}));
  s.check("mamt4/primary_view", kCompositeTolerance, views[0], [&](const Tensor& t) {
    return focal_loss(mm.forward({t, views[1], views[2], views[3]}), Label::Cancer, focal);
  });
  s.check("mamt4/bilateral_view", kCompositeTolerance, views[2], [&](const Tensor& t) {
    return focal_loss(mm.forward({views[0], views[1], t, views[3]}), Label::Normal, focal);
  });
  s.check("mamt4/class_token", kCompositeTolerance, mm.class_token(),
          [&](const Tensor&) { return focal_loss(mm.forward(views), Label::Cancer, focal); });
  s.check("mamt4/head.weight", kCompositeTolerance, mm.head().weight,
          [&](const Tensor&) { return focal_loss(mm.forward(views), Label::Cancer, focal); });
  mm.state().params.zero_grad();

  MiniUNet unet(UNetConfig{3, 8, 8, 3}, derive_seed({seed, 0x55}));
  const Tensor slice_img = s.random({1, 8, 8}, 0.0, 1.0);
  std::vector<double> mask(64);
  for (std::size_t i = 0; i < 64; ++i) mask[i] = (i % 8) < 4 ? 1.0 : 0.0;
  s.check("unet/image", kCompositeTolerance, slice_img,
          [&](const Tensor& t) { return bce_with_logits(unet.forward(t), mask); });
  s.check("unet/out.bias", kCompositeTolerance, unet.state().params.at("unet.out.bias").tensor,
          [&](const Tensor&) { return bce_with_logits(unet.forward(slice_img), mask); });
  unet.state().params.zero_grad();
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed) {
  Suite s(seed);
  elementwise_cases(s);
  structural_cases(s);
  layer_cases(s);
  attention_cases(s, seed);
  loss_cases(s);
  model_cases(s, seed);
  return s.take();
}

}  // namespace mamt4
