#pragma once

// Parameterized layers: linear, conv2d, pooling, upsampling, the GELU MLP,
// multi-head self-attention and the pre-norm Transformer Encoder block.
// Layers are free functions of (input, parameter handles); parameters live
// in a ParameterSet owned by the model.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mamt4/rng.hpp"
#include "mamt4/tensor.hpp"

namespace mamt4 {

struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

class ParameterSet {
 public:
  // Registers a parameter; duplicate names are rejected.
  Tensor add(std::string name, Tensor tensor, bool trainable = true);

  const std::vector<Parameter>& items() const { return items_; }
  std::vector<Parameter>& items() { return items_; }
  bool contains(std::string_view name) const;
  const Parameter& at(std::string_view name) const;
  Parameter& at(std::string_view name);
  std::size_t size() const { return items_.size(); }
  std::size_t total_elements() const;

  // Freezes or unfreezes every parameter whose name starts with prefix.
  // Frozen parameters have requires_grad=false and never hold gradients.
  void set_trainable(std::string_view prefix, bool trainable);
  void zero_grad();

  using Snapshot = std::vector<std::vector<double>>;
  Snapshot snapshot() const;
  void restore(const Snapshot& snap);

 private:
  std::vector<Parameter> items_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// Deterministic parameter initialization. Weight matrices are
// Xavier-uniform, biases and embeddings zero, layer-norm gains one.
class ParamBuilder {
 public:
  ParamBuilder(ParameterSet& set, std::uint64_t seed) : set_(set), rng_(seed) {}

  Tensor xavier(const std::string& name, const Shape& shape, std::size_t fan_in, std::size_t fan_out);
  Tensor zeros(const std::string& name, const Shape& shape);
  Tensor ones(const std::string& name, const Shape& shape);

 private:
  ParameterSet& set_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Linear

struct LinearParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

LinearParams make_linear(ParamBuilder& pb, const std::string& prefix, std::size_t in, std::size_t out);

// x[*, in] -> x·W + b
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
inline Tensor linear(const Tensor& x, const LinearParams& p) { return linear(x, p.weight, p.bias); }

// ---------------------------------------------------------------------------
// Convolution, pooling, upsampling on [C, H, W] tensors

enum class Padding { Same, Valid };

struct Conv2dParams {
  Tensor kernels;  // [C_out, C_in, k, k]
  Tensor bias;     // [C_out]
};

Conv2dParams make_conv2d(ParamBuilder& pb, const std::string& prefix, std::size_t c_in,
                         std::size_t c_out, std::size_t k);

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias, std::size_t stride = 1,
              Padding padding = Padding::Same);
inline Tensor conv2d(const Tensor& x, const Conv2dParams& p, std::size_t stride = 1,
                     Padding padding = Padding::Same) {
  return conv2d(x, p.kernels, p.bias, stride, padding);
}

enum class PoolOp { Max, Avg };

// Max pooling routes gradient to the first maximal cell in row-major order.
Tensor pool2d(PoolOp op, const Tensor& x, std::size_t window, std::size_t stride);
// [C, H, W] -> [C]
Tensor global_avg_pool(const Tensor& x);
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

// ---------------------------------------------------------------------------
// Transformer encoder

struct TEConfig {
  std::size_t num_blocks = 2;
  std::size_t num_heads = 4;
  std::size_t token_dim = 16;
  std::size_t mlp_hidden = 64;
  double eps = 1e-5;

  static TEConfig full() { return {12, 12, 192, 768, 1e-5}; }
  static TEConfig desk() { return {2, 4, 16, 64, 1e-5}; }
  void validate() const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct MsaParams {
  Tensor w_q;  // [token_dim, token_dim]; head h owns columns [h*d, (h+1)*d)
  Tensor w_k;
  Tensor w_v;
  Tensor w_o;
};

struct MlpParams {
  LinearParams fc1;
  LinearParams fc2;
};

struct TeBlockParams {
  LayerNormParams ln1;
  MsaParams attn;
  LayerNormParams ln2;
  MlpParams mlp;
};

LayerNormParams make_layer_norm(ParamBuilder& pb, const std::string& prefix, std::size_t width);
MsaParams make_msa(ParamBuilder& pb, const std::string& prefix, std::size_t token_dim);
TeBlockParams make_te_block(ParamBuilder& pb, const std::string& prefix, const TEConfig& cfg);

// Scaled dot-product attention for all heads at once. q, k, v are [T, D]
// with heads laid out as contiguous column blocks. Sums over the key axis
// are taken over sorted addends, so permuting the tokens permutes the
// output rows bit-exactly.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads);

// Attention probabilities per head, [num_heads, T, T]; no graph.
Tensor attention_probabilities(const Tensor& q, const Tensor& k, std::size_t num_heads);

Tensor msa(const Tensor& x, const MsaParams& p, std::size_t num_heads);
Tensor mlp(const Tensor& x, const MlpParams& p);

// y = x + msa(ln1(x)); out = y + mlp(ln2(y))
Tensor te_block(const Tensor& x, const TeBlockParams& p, const TEConfig& cfg);

// Attention maps of the block's MSA for input x; [num_heads, T, T].
Tensor te_block_attention(const Tensor& x, const TeBlockParams& p, const TEConfig& cfg);

}  // namespace mamt4
