#include "mamt4/layers.hpp"

#include <algorithm>
#include <cmath>

#include "mamt4/kernels.hpp"

namespace mamt4 {

// ---------------------------------------------------------------------------
// ParameterSet

Tensor ParameterSet::add(std::string name, Tensor tensor, bool trainable) {
  if (index_.count(name) != 0) throw Error(ErrorKind::InvalidConfig, "duplicate parameter name " + name);
  tensor.set_requires_grad(trainable);
  index_.emplace(name, items_.size());
  items_.push_back({std::move(name), tensor, trainable});
  return tensor;
}

bool ParameterSet::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

const Parameter& ParameterSet::at(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorKind::InvalidConfig, "unknown parameter " + std::string(name));
  return items_[it->second];
}

Parameter& ParameterSet::at(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorKind::InvalidConfig, "unknown parameter " + std::string(name));
  return items_[it->second];
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

void ParameterSet::set_trainable(std::string_view prefix, bool trainable) {
  for (auto& p : items_) {
    if (std::string_view(p.name).substr(0, prefix.size()) == prefix) {
      p.trainable = trainable;
      p.tensor.set_requires_grad(trainable);
    }
  }
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

ParameterSet::Snapshot ParameterSet::snapshot() const {
  Snapshot snap;
  snap.reserve(items_.size());
  for (const auto& p : items_) snap.emplace_back(p.tensor.data());
  return snap;
}

void ParameterSet::restore(const Snapshot& snap) {
  if (snap.size() != items_.size()) throw Error(ErrorKind::ShapeMismatch, "snapshot size mismatch");
  for (std::size_t i = 0; i < items_.size(); ++i) {
    auto dst = items_[i].tensor.mutable_values();
    if (dst.size() != snap[i].size()) throw Error(ErrorKind::ShapeMismatch, "snapshot tensor size mismatch");
    std::copy(snap[i].begin(), snap[i].end(), dst.begin());
  }
}

// ---------------------------------------------------------------------------
// ParamBuilder

Tensor ParamBuilder::xavier(const std::string& name, const Shape& shape, std::size_t fan_in,
                            std::size_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.mutable_values()) v = rng_.uniform(-bound, bound);
  return set_.add(name, t);
}

Tensor ParamBuilder::zeros(const std::string& name, const Shape& shape) {
  return set_.add(name, Tensor::zeros(shape));
}

Tensor ParamBuilder::ones(const std::string& name, const Shape& shape) {
  return set_.add(name, Tensor::ones(shape));
}

// ---------------------------------------------------------------------------
// Linear

LinearParams make_linear(ParamBuilder& pb, const std::string& prefix, std::size_t in, std::size_t out) {
  LinearParams p;
  p.weight = pb.xavier(prefix + ".weight", {in, out}, in, out);
  p.bias = pb.zeros(prefix + ".bias", {out});
  return p;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.shape().back() != weight.dim(0)) {
    throw Error(ErrorKind::ShapeMismatch, "linear input " + shape_str(x.shape()) + " vs weight " +
                                              shape_str(weight.shape()));
  }
  Tensor x2 = x.rank() == 1 ? reshape(x, {1, x.dim(0)}) : x;
  Tensor y = add(matmul(x2, weight), bias);
  if (x.rank() == 1) return reshape(y, {weight.dim(1)});
  return y;
}

// ---------------------------------------------------------------------------
// Convolution

Conv2dParams make_conv2d(ParamBuilder& pb, const std::string& prefix, std::size_t c_in,
                         std::size_t c_out, std::size_t k) {
  Conv2dParams p;
  p.kernels = pb.xavier(prefix + ".kernels", {c_out, c_in, k, k}, c_in * k * k, c_out * k * k);
  p.bias = pb.zeros(prefix + ".bias", {c_out});
  return p;
}

namespace {

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, stride, pad, out_h, out_w;
  std::size_t patch() const { return c_in * k * k; }
  std::size_t pixels() const { return out_h * out_w; }
};

// col[(c*k + ky)*k + kx, oy*out_w + ox]
void im2col(const ConvGeometry& g, const double* x, double* col) {
  const auto ih = static_cast<std::ptrdiff_t>(g.h);
  const auto iw = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.out_w;
          if (y < 0 || y >= ih) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (xx < 0 || xx >= iw) ? 0.0 : src[xx];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, double* x) {
  const auto ih = static_cast<std::ptrdiff_t>(g.h);
  const auto iw = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= ih) continue;
          double* dst = x + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (xx >= 0 && xx < iw) dst[xx] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias, std::size_t stride,
              Padding padding) {
  if (x.rank() != 3 || kernels.rank() != 4) {
    throw Error(ErrorKind::InvalidShape, "conv2d expects x[C,H,W] and kernels[Co,Ci,k,k], got " +
                                             shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
  }
  ConvGeometry g{};
  g.c_in = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.c_out = kernels.dim(0);
  g.k = kernels.dim(2);
  g.stride = stride;
  if (kernels.dim(1) != g.c_in || kernels.dim(3) != g.k) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d kernel " + shape_str(kernels.shape()) +
                                              " does not match input " + shape_str(x.shape()));
  }
  if (g.k % 2 == 0) throw Error(ErrorKind::InvalidShape, "conv2d kernel size must be odd");
  if (stride == 0) throw Error(ErrorKind::InvalidShape, "conv2d stride must be positive");
  if (bias.numel() != g.c_out) throw Error(ErrorKind::ShapeMismatch, "conv2d bias length mismatch");
  g.pad = padding == Padding::Same ? (g.k - 1) / 2 : 0;
  if (g.k > g.h + 2 * g.pad || g.k > g.w + 2 * g.pad) {
    throw Error(ErrorKind::InvalidShape, "conv2d kernel larger than padded input " + shape_str(x.shape()));
  }
  g.out_h = (g.h + 2 * g.pad - g.k) / stride + 1;
  g.out_w = (g.w + 2 * g.pad - g.k) / stride + 1;

  auto col = std::make_shared<std::vector<double>>(g.patch() * g.pixels());
  im2col(g, x.data().data(), col->data());
  std::vector<double> out(g.c_out * g.pixels());
  kernels::gemm_nn(g.c_out, g.pixels(), g.patch(), kernels.data().data(), col->data(), out.data(), false);
  const auto& bv = bias.data();
  for (std::size_t o = 0; o < g.c_out; ++o) {
    double* row = out.data() + o * g.pixels();
    for (std::size_t p = 0; p < g.pixels(); ++p) row[p] += bv[o];
  }
  return detail::record(
      {g.c_out, g.out_h, g.out_w}, std::move(out), {x, kernels, bias},
      [x, kernels, bias, g, col](std::span<const double> grad) {
        auto gx = detail::grad_sink(x);
        auto gk = detail::grad_sink(kernels);
        auto gb = detail::grad_sink(bias);
        if (!gb.empty()) {
          for (std::size_t o = 0; o < g.c_out; ++o) {
            const double* row = grad.data() + o * g.pixels();
            double s = 0.0;
            for (std::size_t p = 0; p < g.pixels(); ++p) s += row[p];
            gb[o] += s;
          }
        }
        if (!gk.empty()) kernels::gemm_nt_acc(g.c_out, g.patch(), g.pixels(), grad.data(), col->data(), gk.data());
        if (!gx.empty()) {
          std::vector<double> dcol(g.patch() * g.pixels(), 0.0);
          kernels::gemm_tn_acc(g.patch(), g.pixels(), g.c_out, kernels.data().data(), grad.data(), dcol.data());
          col2im_add(g, dcol.data(), gx.data());
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------------------
// Pooling and upsampling

Tensor pool2d(PoolOp op, const Tensor& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 3) throw Error(ErrorKind::InvalidShape, "pool2d expects [C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0);
  const std::size_t h = x.dim(1);
  const std::size_t w = x.dim(2);
  if (window == 0 || stride == 0 || window > h || window > w) {
    throw Error(ErrorKind::InvalidShape, "pool window " + std::to_string(window) + " exceeds input " +
                                             shape_str(x.shape()));
  }
  const std::size_t oh = (h - window) / stride + 1;
  const std::size_t ow = (w - window) / stride + 1;
  const auto& xv = x.data();
  std::vector<double> out(c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (op == PoolOp::Max) argmax->resize(out.size());
  const double inv_area = 1.0 / static_cast<double>(window * window);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t o = (ch * oh + oy) * ow + ox;
        if (op == PoolOp::Max) {
          std::size_t best = (ch * h + oy * stride) * w + ox * stride;
          for (std::size_t wy = 0; wy < window; ++wy) {
            for (std::size_t wx = 0; wx < window; ++wx) {
              const std::size_t idx = (ch * h + oy * stride + wy) * w + ox * stride + wx;
              if (xv[idx] > xv[best]) best = idx;
            }
          }
          (*argmax)[o] = best;
          out[o] = xv[best];
        } else {
          double s = 0.0;
          for (std::size_t wy = 0; wy < window; ++wy) {
            for (std::size_t wx = 0; wx < window; ++wx) s += xv[(ch * h + oy * stride + wy) * w + ox * stride + wx];
          }
          out[o] = s * inv_area;
        }
      }
    }
  }
  return detail::record(
      {c, oh, ow}, std::move(out), {x},
      [x, op, argmax, c, h, w, oh, ow, window, stride, inv_area](std::span<const double> g) {
        auto gx = detail::grad_sink(x);
        if (gx.empty()) return;
        if (op == PoolOp::Max) {
          for (std::size_t o = 0; o < g.size(); ++o) gx[(*argmax)[o]] += g[o];
          return;
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double gv = g[(ch * oh + oy) * ow + ox] * inv_area;
              for (std::size_t wy = 0; wy < window; ++wy) {
                for (std::size_t wx = 0; wx < window; ++wx) gx[(ch * h + oy * stride + wy) * w + ox * stride + wx] += gv;
              }
            }
          }
        }
      },
      op == PoolOp::Max ? "max_pool" : "avg_pool");
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) throw Error(ErrorKind::InvalidShape, "global_avg_pool expects [C,H,W]");
  return mean(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}), 1);
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (x.rank() != 3) throw Error(ErrorKind::InvalidShape, "upsample_nearest expects [C,H,W]");
  if (factor < 2) throw Error(ErrorKind::InvalidConfig, "upsample factor must be >= 2");
  const std::size_t c = x.dim(0);
  const std::size_t h = x.dim(1);
  const std::size_t w = x.dim(2);
  const std::size_t oh = h * factor;
  const std::size_t ow = w * factor;
  const auto& xv = x.data();
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      const double* src = xv.data() + (ch * h + y / factor) * w;
      double* dst = out.data() + (ch * oh + y) * ow;
      for (std::size_t xx = 0; xx < ow; ++xx) dst[xx] = src[xx / factor];
    }
  }
  return detail::record(
      {c, oh, ow}, std::move(out), {x},
      [x, c, h, w, oh, ow, factor](std::span<const double> g) {
        auto gx = detail::grad_sink(x);
        if (gx.empty()) return;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t y = 0; y < oh; ++y) {
            double* dst = gx.data() + (ch * h + y / factor) * w;
            const double* src = g.data() + (ch * oh + y) * ow;
            for (std::size_t xx = 0; xx < ow; ++xx) dst[xx / factor] += src[xx];
          }
        }
      },
      "upsample_nearest");
}

// ---------------------------------------------------------------------------
// Transformer encoder

void TEConfig::validate() const {
  if (num_blocks == 0 || num_heads == 0 || token_dim == 0 || mlp_hidden == 0) {
    throw Error(ErrorKind::InvalidConfig, "TE dimensions must be positive");
  }
  if (token_dim % num_heads != 0) {
    throw Error(ErrorKind::InvalidConfig, "token_dim " + std::to_string(token_dim) +
                                              " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (!(eps > 0.0)) throw Error(ErrorKind::InvalidConfig, "layer-norm eps must be positive");
}

LayerNormParams make_layer_norm(ParamBuilder& pb, const std::string& prefix, std::size_t width) {
  return {pb.ones(prefix + ".gain", {width}), pb.zeros(prefix + ".bias", {width})};
}

MsaParams make_msa(ParamBuilder& pb, const std::string& prefix, std::size_t d) {
  MsaParams p;
  p.w_q = pb.xavier(prefix + ".w_q", {d, d}, d, d);
  p.w_k = pb.xavier(prefix + ".w_k", {d, d}, d, d);
  p.w_v = pb.xavier(prefix + ".w_v", {d, d}, d, d);
  p.w_o = pb.xavier(prefix + ".w_o", {d, d}, d, d);
  return p;
}

TeBlockParams make_te_block(ParamBuilder& pb, const std::string& prefix, const TEConfig& cfg) {
  TeBlockParams p;
  p.ln1 = make_layer_norm(pb, prefix + ".ln1", cfg.token_dim);
  p.attn = make_msa(pb, prefix + ".msa", cfg.token_dim);
  p.ln2 = make_layer_norm(pb, prefix + ".ln2", cfg.token_dim);
  p.mlp.fc1 = make_linear(pb, prefix + ".mlp.fc1", cfg.token_dim, cfg.mlp_hidden);
  p.mlp.fc2 = make_linear(pb, prefix + ".mlp.fc2", cfg.mlp_hidden, cfg.token_dim);
  return p;
}

namespace {

double sorted_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

void check_attention_inputs(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "attention expects equal [T,D] q/k/v, got " +
                                              shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                                              shape_str(v.shape()));
  }
  if (heads == 0 || q.dim(1) % heads != 0) {
    throw Error(ErrorKind::InvalidConfig, "width " + std::to_string(q.dim(1)) +
                                              " not divisible by num_heads " + std::to_string(heads));
  }
}

// probs[h][i*T + j]
std::vector<double> compute_probs(const Tensor& q, const Tensor& k, std::size_t heads) {
  const std::size_t t = q.dim(0);
  const std::size_t width = q.dim(1);
  const std::size_t d = width / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const auto& qv = q.data();
  const auto& kv = k.data();
  std::vector<double> probs(heads * t * t);
  std::vector<double> terms(t);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      double* row = probs.data() + (h * t + i) * t;
      for (std::size_t j = 0; j < t; ++j) {
        row[j] = kernels::dot(qv.data() + i * width + h * d, kv.data() + j * width + h * d, d) * inv_sqrt_d;
      }
      const double mx = *std::max_element(row, row + t);
      for (std::size_t j = 0; j < t; ++j) {
        row[j] = std::exp(row[j] - mx);
        terms[j] = row[j];
      }
      const double z = sorted_sum(terms);
      for (std::size_t j = 0; j < t; ++j) row[j] /= z;
    }
  }
  return probs;
}

}  // namespace

Tensor attention_probabilities(const Tensor& q, const Tensor& k, std::size_t num_heads) {
  check_attention_inputs(q, k, k, num_heads);
  const std::size_t t = q.dim(0);
  return Tensor::from({num_heads, t, t}, compute_probs(q, k, num_heads));
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads) {
  check_attention_inputs(q, k, v, num_heads);
  const std::size_t t = q.dim(0);
  const std::size_t width = q.dim(1);
  const std::size_t d = width / num_heads;
  auto probs = std::make_shared<std::vector<double>>(compute_probs(q, k, num_heads));
  const auto& vv = v.data();
  std::vector<double> out(t * width);
  std::vector<double> terms(t);
  for (std::size_t h = 0; h < num_heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      const double* a = probs->data() + (h * t + i) * t;
      for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t j = 0; j < t; ++j) terms[j] = a[j] * vv[j * width + h * d + c];
        out[i * width + h * d + c] = sorted_sum(terms);
      }
    }
  }
  return detail::record(
      q.shape(), std::move(out), {q, k, v},
      [q, k, v, probs, num_heads, t, width, d](std::span<const double> g) {
        auto gq = detail::grad_sink(q);
        auto gk = detail::grad_sink(k);
        auto gv = detail::grad_sink(v);
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        const auto& qv = q.data();
        const auto& kv = k.data();
        const auto& vv = v.data();
        std::vector<double> da(t);
        for (std::size_t h = 0; h < num_heads; ++h) {
          for (std::size_t i = 0; i < t; ++i) {
            const double* a = probs->data() + (h * t + i) * t;
            const double* gi = g.data() + i * width + h * d;
            if (!gv.empty()) {
              for (std::size_t j = 0; j < t; ++j) kernels::axpy(a[j], gi, gv.data() + j * width + h * d, d);
            }
            if (gq.empty() && gk.empty()) continue;
            double weighted = 0.0;
            for (std::size_t j = 0; j < t; ++j) {
              da[j] = kernels::dot(gi, vv.data() + j * width + h * d, d);
              weighted += a[j] * da[j];
            }
            for (std::size_t j = 0; j < t; ++j) {
              const double ds = a[j] * (da[j] - weighted) * inv_sqrt_d;
              if (ds == 0.0) continue;
              if (!gq.empty()) kernels::axpy(ds, kv.data() + j * width + h * d, gq.data() + i * width + h * d, d);
              if (!gk.empty()) kernels::axpy(ds, qv.data() + i * width + h * d, gk.data() + j * width + h * d, d);
            }
          }
        }
      },
      "attention");
}

Tensor msa(const Tensor& x, const MsaParams& p, std::size_t num_heads) {
  if (x.rank() != 2) throw Error(ErrorKind::InvalidShape, "msa expects [T,D], got " + shape_str(x.shape()));
  Tensor q = matmul(x, p.w_q);
  Tensor k = matmul(x, p.w_k);
  Tensor v = matmul(x, p.w_v);
  return matmul(multi_head_attention(q, k, v, num_heads), p.w_o);
}

Tensor mlp(const Tensor& x, const MlpParams& p) { return linear(gelu(linear(x, p.fc1)), p.fc2); }

Tensor te_block(const Tensor& x, const TeBlockParams& p, const TEConfig& cfg) {
  cfg.validate();
  if (x.rank() != 2 || x.dim(1) != cfg.token_dim) {
    throw Error(ErrorKind::InvalidShape, "te_block expects [T," + std::to_string(cfg.token_dim) + "], got " +
                                             shape_str(x.shape()));
  }
  Tensor y = add(x, msa(layer_norm(x, p.ln1.gain, p.ln1.bias, cfg.eps), p.attn, cfg.num_heads));
  return add(y, mlp(layer_norm(y, p.ln2.gain, p.ln2.bias, cfg.eps), p.mlp));
}

Tensor te_block_attention(const Tensor& x, const TeBlockParams& p, const TEConfig& cfg) {
  NoGradGuard guard;
  Tensor n = layer_norm(x, p.ln1.gain, p.ln1.bias, cfg.eps);
  return attention_probabilities(matmul(n, p.attn.w_q), matmul(n, p.attn.w_k), cfg.num_heads);
}

}  // namespace mamt4
