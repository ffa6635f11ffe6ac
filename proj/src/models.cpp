#include "mamt4/models.hpp"

#include <sstream>

namespace mamt4 {

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace

std::uint64_t fingerprint_of(const std::string& description) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : description) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Configs

void BackboneConfig::validate() const {
  if (widths.empty() || feature_dim == 0 || channels == 0 || kernel % 2 == 0) {
    throw Error(ErrorKind::InvalidConfig, "invalid backbone config " + describe());
  }
  std::size_t size = input_size;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (size < 2) throw Error(ErrorKind::InvalidConfig, "input too small for backbone depth: " + describe());
    size /= 2;
  }
}

std::string BackboneConfig::describe() const {
  std::ostringstream os;
  os << "backbone(widths=" << join(widths) << ";D=" << feature_dim << ";in=" << input_size << "x" << input_size
     << "x" << channels << ";k=" << kernel << ")";
  return os.str();
}

void MamT4Config::validate() const {
  te.validate();
  if (tokens_per_view == 0 || num_views == 0 || feature_dim % tokens_per_view != 0) {
    throw Error(ErrorKind::InvalidConfig, "feature_dim " + std::to_string(feature_dim) +
                                              " not divisible by tokens_per_view " + std::to_string(tokens_per_view));
  }
  if (token_dim() != te.token_dim) {
    throw Error(ErrorKind::InvalidConfig, "token_dim " + std::to_string(token_dim()) +
                                              " disagrees with TE token_dim " + std::to_string(te.token_dim));
  }
}

std::string MamT4Config::describe() const {
  std::ostringstream os;
  os << "mamt4(tokens=" << tokens_per_view << ";views=" << num_views << ";D=" << feature_dim << ";L=" << te.num_blocks
     << ";heads=" << te.num_heads << ";dim=" << te.token_dim << ";mlp=" << te.mlp_hidden << ")";
  return os.str();
}

void UNetConfig::validate() const {
  if (depth == 0 || base_width == 0 || kernel % 2 == 0) throw Error(ErrorKind::InvalidConfig, "invalid " + describe());
}

std::string UNetConfig::describe() const {
  std::ostringstream os;
  os << "unet(depth=" << depth << ";base=" << base_width << ";in=" << input_size << ";k=" << kernel << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Backbone

Backbone::Backbone(ParamBuilder& pb, const BackboneConfig& cfg, const std::string& prefix) : cfg_(cfg) {
  cfg_.validate();
  std::size_t c_in = cfg.channels;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    stages_.push_back(make_conv2d(pb, prefix + ".stage" + std::to_string(i), c_in, cfg.widths[i], cfg.kernel));
    c_in = cfg.widths[i];
  }
  projection_ = make_conv2d(pb, prefix + ".proj", c_in, cfg.feature_dim, 1);
}

Tensor Backbone::forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != cfg_.channels || image.dim(1) != cfg_.input_size ||
      image.dim(2) != cfg_.input_size) {
    throw Error(ErrorKind::InvalidShape, "backbone expects [" + std::to_string(cfg_.channels) + "," +
                                             std::to_string(cfg_.input_size) + "," +
                                             std::to_string(cfg_.input_size) + "], got " +
                                             shape_str(image.shape()));
  }
  Tensor x = image;
  for (const auto& stage : stages_) x = pool2d(PoolOp::Max, gelu(conv2d(x, stage)), 2, 2);
  return global_avg_pool(conv2d(x, projection_));
}

// ---------------------------------------------------------------------------
// Single view

std::uint64_t SingleViewModel::fingerprint_for(const BackboneConfig& cfg) {
  return fingerprint_of("single_view|" + cfg.describe());
}

SingleViewModel::SingleViewModel(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  ParamBuilder pb(state_.params, seed);
  backbone_ = Backbone(pb, cfg, "backbone");
  head_ = make_linear(pb, "head", cfg.feature_dim, 1);
  state_.fingerprint = fingerprint_for(cfg);
}

Tensor SingleViewModel::logit(const Tensor& image) const { return linear(features(image), head_); }

// ---------------------------------------------------------------------------
// MamT4

std::uint64_t MamT4Model::fingerprint_for(const BackboneConfig& backbone_cfg, const MamT4Config& cfg) {
  return fingerprint_of("mamt4|" + backbone_cfg.describe() + "|" + cfg.describe());
}

MamT4Model::MamT4Model(const BackboneConfig& backbone_cfg, const MamT4Config& cfg, std::uint64_t seed)
    : backbone_cfg_(backbone_cfg), cfg_(cfg) {
  cfg_.validate();
  if (cfg.feature_dim != backbone_cfg.feature_dim) {
    throw Error(ErrorKind::InvalidConfig, "MamT4 feature_dim differs from backbone feature_dim");
  }
  ParamBuilder pb(state_.params, seed);
  backbone_ = Backbone(pb, backbone_cfg, "backbone");
  const std::size_t d = cfg.token_dim();
  token_embed_ = make_linear(pb, "mamt4.token_embed", d, d);
  class_token_ = pb.zeros("mamt4.class_token", {1, d});
  pos_embed_ = pb.zeros("mamt4.pos_embed", {cfg.seq_len(), d});
  for (std::size_t b = 0; b < cfg.te.num_blocks; ++b) {
    blocks_.push_back(make_te_block(pb, "mamt4.block" + std::to_string(b), cfg.te));
  }
  head_ = make_linear(pb, "mamt4.head", d, 1);
  state_.params.set_trainable("backbone.", false);
  state_.fingerprint = fingerprint_for(backbone_cfg, cfg);
}

Tensor MamT4Model::extract_feature(const Tensor& image) const {
  NoGradGuard guard;
  return backbone_.forward(image);
}

Tensor MamT4Model::tokenize(const std::vector<Tensor>& views) const {
  if (views.size() != cfg_.num_views) {
    throw Error(ErrorKind::InvalidShape, "expected " + std::to_string(cfg_.num_views) + " views, got " +
                                             std::to_string(views.size()));
  }
  std::vector<Tensor> grids;
  grids.reserve(views.size());
  for (const auto& v : views) {
    if (v.numel() != cfg_.feature_dim) {
      throw Error(ErrorKind::InvalidShape, "view feature has " + std::to_string(v.numel()) + " values, expected " +
                                               std::to_string(cfg_.feature_dim));
    }
    grids.push_back(reshape(v, {cfg_.tokens_per_view, cfg_.token_dim()}));
  }
  return concat(grids, 0);
}

Tensor MamT4Model::forward_tokens(const Tensor& tokens) const {
  if (tokens.rank() != 2 || tokens.dim(0) != cfg_.fused_tokens() || tokens.dim(1) != cfg_.token_dim()) {
    throw Error(ErrorKind::InvalidShape, "expected tokens [" + std::to_string(cfg_.fused_tokens()) + "," +
                                             std::to_string(cfg_.token_dim()) + "], got " + shape_str(tokens.shape()));
  }
  Tensor seq = concat({class_token_, linear(tokens, token_embed_)}, 0);
  seq = add(seq, pos_embed_);
  for (const auto& block : blocks_) seq = te_block(seq, block, cfg_.te);
  Tensor cls = slice(seq, 0, 0, 1);
  return reshape(linear(cls, head_), {1});
}

Tensor MamT4Model::forward(const std::vector<Tensor>& views) const { return forward_tokens(tokenize(views)); }

void MamT4Model::load_backbone(const ModelState& single_view_state) {
  if (single_view_state.fingerprint != SingleViewModel::fingerprint_for(backbone_cfg_)) {
    throw Error(ErrorKind::IncompatibleCheckpoint, "backbone checkpoint fingerprint does not match " +
                                                       backbone_cfg_.describe());
  }
  for (auto& p : state_.params.items()) {
    if (p.name.rfind("backbone.", 0) != 0) continue;
    const auto& src = single_view_state.params.at(p.name).tensor;
    if (src.shape() != p.tensor.shape()) {
      throw Error(ErrorKind::IncompatibleCheckpoint, "shape mismatch for " + p.name);
    }
    std::copy(src.data().begin(), src.data().end(), p.tensor.mutable_values().begin());
  }
}

// ---------------------------------------------------------------------------
// Mini U-Net

std::uint64_t MiniUNet::fingerprint_for(const UNetConfig& cfg) { return fingerprint_of("unet|" + cfg.describe()); }

MiniUNet::MiniUNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  ParamBuilder pb(state_.params, seed);
  std::size_t c_in = 1;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::size_t width = cfg.base_width << l;
    encoders_.push_back(make_conv2d(pb, "unet.enc" + std::to_string(l), c_in, width, cfg.kernel));
    c_in = width;
  }
  const std::size_t bottom = cfg.base_width << cfg.depth;
  bottleneck_ = make_conv2d(pb, "unet.bottleneck", c_in, bottom, cfg.kernel);
  std::size_t below = bottom;
  decoders_.resize(cfg.depth);
  for (std::size_t l = cfg.depth; l-- > 0;) {
    const std::size_t width = cfg.base_width << l;
    decoders_[l] = make_conv2d(pb, "unet.dec" + std::to_string(l), below + width, width, cfg.kernel);
    below = width;
  }
  output_ = make_conv2d(pb, "unet.out", cfg.base_width, 1, 1);
  state_.fingerprint = fingerprint_for(cfg);
}

Tensor MiniUNet::forward(const Tensor& image) const {
  const std::size_t unit = std::size_t{1} << cfg_.depth;
  if (image.rank() != 3 || image.dim(0) != 1 || image.dim(1) % unit != 0 || image.dim(2) % unit != 0) {
    throw Error(ErrorKind::InvalidShape, "U-Net input must be [1,H,W] with H,W divisible by " +
                                             std::to_string(unit) + ", got " + shape_str(image.shape()));
  }
  std::vector<Tensor> skips;
  Tensor x = image;
  for (const auto& enc : encoders_) {
    x = gelu(conv2d(x, enc));
    skips.push_back(x);
    x = pool2d(PoolOp::Max, x, 2, 2);
  }
  x = gelu(conv2d(x, bottleneck_));
  for (std::size_t l = cfg_.depth; l-- > 0;) {
    x = concat({upsample_nearest(x, 2), skips[l]}, 0);
    x = gelu(conv2d(x, decoders_[l]));
  }
  return conv2d(x, output_);
}

}  // namespace mamt4
