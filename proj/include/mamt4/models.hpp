#pragma once

// The three networks: the single-view CNN classifier (stage 1), the
// four-view Transformer-encoder fusion model (stage 2) and the miniature
// U-Net breast segmenter.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mamt4/layers.hpp"

namespace mamt4 {

struct BackboneConfig {
  std::vector<std::size_t> widths{8, 16, 32, 64};
  std::size_t feature_dim = 128;
  std::size_t input_size = 64;
  std::size_t channels = 3;
  std::size_t kernel = 3;

  static BackboneConfig desk() { return {}; }
  static BackboneConfig full() { return {{8, 16, 32, 64}, 1536, 512, 3, 3}; }
  void validate() const;
  std::string describe() const;
};

struct MamT4Config {
  std::size_t tokens_per_view = 8;
  std::size_t num_views = 4;
  std::size_t feature_dim = 128;
  TEConfig te = TEConfig::desk();

  static MamT4Config desk() { return {8, 4, 128, TEConfig::desk()}; }
  static MamT4Config full() { return {8, 4, 1536, TEConfig::full()}; }

  std::size_t token_dim() const { return feature_dim / tokens_per_view; }
  std::size_t fused_tokens() const { return num_views * tokens_per_view; }
  std::size_t seq_len() const { return fused_tokens() + 1; }
  void validate() const;
  std::string describe() const;
};

struct UNetConfig {
  std::size_t depth = 3;
  std::size_t base_width = 8;
  std::size_t input_size = 64;
  std::size_t kernel = 3;

  static UNetConfig desk() { return {}; }
  void validate() const;
  std::string describe() const;
};

std::uint64_t fingerprint_of(const std::string& description);

// Named parameters plus the fingerprint of the configuration that built them.
struct ModelState {
  ParameterSet params;
  std::uint64_t fingerprint = 0;
};

// conv -> gelu -> maxpool stages, a 1x1 projection to feature_dim channels,
// then global average pooling.
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParamBuilder& pb, const BackboneConfig& cfg, const std::string& prefix);

  // image [channels, input_size, input_size] -> feature vector [feature_dim]
  Tensor forward(const Tensor& image) const;
  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  std::vector<Conv2dParams> stages_;
  Conv2dParams projection_;
};

class SingleViewModel {
 public:
  explicit SingleViewModel(const BackboneConfig& cfg, std::uint64_t seed = 0);
  SingleViewModel(SingleViewModel&&) = default;
  SingleViewModel& operator=(SingleViewModel&&) = default;
  SingleViewModel(const SingleViewModel&) = delete;
  SingleViewModel& operator=(const SingleViewModel&) = delete;

  static std::uint64_t fingerprint_for(const BackboneConfig& cfg);

  Tensor features(const Tensor& image) const { return backbone_.forward(image); }
  // Raw logit, shape [1]; the probability is sigmoid(logit).
  Tensor logit(const Tensor& image) const;

  ModelState& state() { return state_; }
  const ModelState& state() const { return state_; }
  const BackboneConfig& config() const { return cfg_; }
  const LinearParams& head() const { return head_; }

 private:
  BackboneConfig cfg_;
  ModelState state_;
  Backbone backbone_;
  LinearParams head_;
};

class MamT4Model {
 public:
  MamT4Model(const BackboneConfig& backbone_cfg, const MamT4Config& cfg, std::uint64_t seed = 0);
  MamT4Model(MamT4Model&&) = default;
  MamT4Model& operator=(MamT4Model&&) = default;
  MamT4Model(const MamT4Model&) = delete;
  MamT4Model& operator=(const MamT4Model&) = delete;

  static std::uint64_t fingerprint_for(const BackboneConfig& backbone_cfg, const MamT4Config& cfg);

  // Frozen backbone features, computed without recording a graph.
  Tensor extract_feature(const Tensor& image) const;

  // views ordered (primary, ipsilateral, bilateral, bilateral-ipsilateral),
  // each [feature_dim]; returns the logit, shape [1].
  Tensor forward(const std::vector<Tensor>& views) const;
  // Tokens already split and fused: [fused_tokens, token_dim].
  Tensor forward_tokens(const Tensor& tokens) const;
  Tensor tokenize(const std::vector<Tensor>& views) const;

  // Copies backbone.* tensors from a stage-1 state; the source fingerprint
  // must match a single-view model built from the same backbone config.
  void load_backbone(const ModelState& single_view_state);

  ModelState& state() { return state_; }
  const ModelState& state() const { return state_; }
  const MamT4Config& config() const { return cfg_; }
  const BackboneConfig& backbone_config() const { return backbone_cfg_; }
  const Tensor& positional_embedding() const { return pos_embed_; }
  const Tensor& class_token() const { return class_token_; }
  const std::vector<TeBlockParams>& blocks() const { return blocks_; }
  const LinearParams& head() const { return head_; }

 private:
  BackboneConfig backbone_cfg_;
  MamT4Config cfg_;
  ModelState state_;
  Backbone backbone_;
  LinearParams token_embed_;
  Tensor class_token_;
  Tensor pos_embed_;
  std::vector<TeBlockParams> blocks_;
  LinearParams head_;
};

class MiniUNet {
 public:
  explicit MiniUNet(const UNetConfig& cfg, std::uint64_t seed = 0);
  MiniUNet(MiniUNet&&) = default;
  MiniUNet& operator=(MiniUNet&&) = default;
  MiniUNet(const MiniUNet&) = delete;
  MiniUNet& operator=(const MiniUNet&) = delete;

  static std::uint64_t fingerprint_for(const UNetConfig& cfg);

  // image [1, H, W] with H, W divisible by 2^depth -> logits [1, H, W]
  Tensor forward(const Tensor& image) const;

  ModelState& state() { return state_; }
  const ModelState& state() const { return state_; }
  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
  ModelState state_;
  std::vector<Conv2dParams> encoders_;
  Conv2dParams bottleneck_;
  std::vector<Conv2dParams> decoders_;
  Conv2dParams output_;
};

}  // namespace mamt4
