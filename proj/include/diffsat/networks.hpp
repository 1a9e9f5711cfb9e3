#pragma once

#include <torch/torch.h>

#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <vector>

namespace diffsat {

/// Shape and width settings for every network in the stack.
///
/// Desk-scale defaults: 64x64 RGB images, VAE factor 8 into 4 latent channels,
/// UNet widths 64/128/256 with cross-attention at latent resolutions 8 and 4.
struct NetworkConfig {
  int image_size = 64;
  int image_channels = 3;
  int latent_channels = 4;
  int vae_factor = 8;
  /// VAE widths per resolution, from full resolution down to the latent grid.
  /// Size must equal log2(vae_factor) + 1.
  std::vector<int> vae_channels = {16, 32, 64, 128};

  int base_channels = 64;
  std::vector<int> channel_mults = {1, 2, 4};
  /// Latent spatial sizes at which UNet blocks carry attention.
  std::vector<int> attention_resolutions = {8, 4};
  int num_res_blocks = 1;
  int heads = 4;
  int norm_groups = 8;

  int cond_dim = 512;  // D, conditioning-vector width
  int proj_dim = 256;  // d, sinusoidal projection width
  int text_dim = 128;  // D_txt
  int text_len = 32;   // L
  int vocab_size = 4096;
  int text_layers = 2;

  int latent_size() const { return image_size / vae_factor; }
  /// Throws ConfigError on inconsistent settings.
  void validate() const;

  bool operator==(const NetworkConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

// ---------------------------------------------------------------------------
// Building blocks

torch::nn::GroupNorm group_norm(int channels, int groups);

/// Multi-head scaled dot-product attention. `key_mask` ([B, Lk] bool, true =
/// attend) is optional.
torch::Tensor multi_head_attention(const torch::Tensor& q, const torch::Tensor& k,
                                   const torch::Tensor& v, int heads,
                                   const torch::Tensor& key_mask = {});

class AttentionImpl : public torch::nn::Module {
 public:
  AttentionImpl(int query_dim, int context_dim, int heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context,
                        const torch::Tensor& context_mask = {});

 private:
  int heads_;
  torch::nn::Linear to_q_{nullptr}, to_k_{nullptr}, to_v_{nullptr}, to_out_{nullptr};
};
TORCH_MODULE(Attention);

class FeedForwardImpl : public torch::nn::Module {
 public:
  FeedForwardImpl(int dim, int mult = 4);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(FeedForward);

/// Residual conv block; `emb`, when given, is projected and added per channel.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_ch, int out_ch, int emb_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb = {});

 protected:
  FORWARD_HAS_DEFAULT_ARGS({1, torch::nn::AnyValue(torch::Tensor())})

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear emb_proj_{nullptr};
  torch::nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Self-attention, cross-attention on text tokens, and feed-forward over the
/// spatial positions of a feature map.
class SpatialTransformerImpl : public torch::nn::Module {
 public:
  SpatialTransformerImpl(int channels, int context_dim, int heads, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context,
                        const torch::Tensor& context_mask);

 private:
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Conv2d proj_in_{nullptr}, proj_out_{nullptr};
  torch::nn::LayerNorm ln1_{nullptr}, ln2_{nullptr}, ln3_{nullptr};
  Attention self_attn_{nullptr}, cross_attn_{nullptr};
  FeedForward ff_{nullptr};
};
TORCH_MODULE(SpatialTransformer);

// ---------------------------------------------------------------------------
// VAE

/// Convolutional VAE; `encode` returns the scaled posterior mean.
class VaeImpl : public torch::nn::Module {
 public:
  explicit VaeImpl(const NetworkConfig& cfg);

  struct Posterior {
    torch::Tensor mean;    // unscaled
    torch::Tensor logvar;  // unscaled
  };
  Posterior encode_posterior(const torch::Tensor& x);
  /// [B, C, H, W] image in [-1, 1] -> [B, C', H/f, W/f] scaled latent.
  torch::Tensor encode(const torch::Tensor& x);
  /// Scaled latent -> image in [-1, 1].
  torch::Tensor decode(const torch::Tensor& z);
  /// Decoder applied to an unscaled latent (training path).
  torch::Tensor decode_unscaled(const torch::Tensor& z);

  double latent_scale() const { return latent_scale_.item<double>(); }
  void set_latent_scale(double s);

 private:
  NetworkConfig cfg_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Sequential decoder_{nullptr};
  torch::Tensor latent_scale_;
};
TORCH_MODULE(Vae);

// ---------------------------------------------------------------------------
// Text encoder stand-in

/// Lowercased word tokens; punctuation and whitespace separate tokens.
std::vector<std::string> tokenize_caption(std::string_view caption);
/// Stable hash of a token into [2, vocab). 0 = padding, 1 = start token.
int hash_token(std::string_view token, int vocab_size);

struct TextEmbedding {
  torch::Tensor tokens;  // [B, L, D_txt]
  torch::Tensor mask;    // [B, L] bool, true = real token
};

class TextEncoderImpl : public torch::nn::Module {
 public:
  explicit TextEncoderImpl(const NetworkConfig& cfg);

  /// [B, L] int64 token ids (start token first, zero padded).
  torch::Tensor token_ids(const std::vector<std::string>& captions) const;
  TextEmbedding encode(const std::vector<std::string>& captions);

 private:
  struct Layer {
    torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr};
    Attention attn{nullptr};
    FeedForward ff{nullptr};
  };
  NetworkConfig cfg_;
  torch::nn::Embedding token_emb_{nullptr}, pos_emb_{nullptr};
  std::vector<Layer> layers_;
  torch::nn::LayerNorm final_ln_{nullptr};
};
TORCH_MODULE(TextEncoder);

// ---------------------------------------------------------------------------
// UNet denoiser

/// Hook applied to the features after every down/mid unit (index = tap index).
using UnitHook = std::function<torch::Tensor(int tap, const torch::Tensor& h)>;

/// Input convolution plus the down and middle blocks of the UNet. Shared by the
/// denoiser and the control branch, which keeps a trainable copy.
class DownPathImpl : public torch::nn::Module {
 public:
  explicit DownPathImpl(const NetworkConfig& cfg);

  /// Runs every down unit and the middle block on features already passed
  /// through `conv_in`. Returns the taps: [conv_in output, one per unit, mid].
  std::vector<torch::Tensor> run(torch::Tensor h, const torch::Tensor& emb,
                                 const TextEmbedding& text, const UnitHook& hook = {});

  /// Channels and spatial size of each tap, in order.
  struct TapShape {
    int channels;
    int size;
  };
  const std::vector<TapShape>& tap_shapes() const { return tap_shapes_; }
  std::size_t num_units() const { return units_.size(); }

  torch::nn::Conv2d conv_in{nullptr};

 private:
  struct Unit {
    ResBlock res{nullptr};
    SpatialTransformer attn{nullptr};
    torch::nn::Conv2d down{nullptr};
  };
  std::vector<Unit> units_;
  ResBlock mid1_{nullptr}, mid2_{nullptr};
  SpatialTransformer mid_attn_{nullptr};
  std::vector<TapShape> tap_shapes_;
};
TORCH_MODULE(DownPath);

class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const NetworkConfig& cfg);

  /// Prediction with the same shape as `z_t`. `residuals`, when non-empty, hold
  /// one tensor per down-path tap and are added to the matching skip (the last
  /// one to the middle block output).
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& cond,
                        const TextEmbedding& text,
                        const std::vector<torch::Tensor>& residuals = {});

  DownPath down{nullptr};
  const NetworkConfig& config() const { return cfg_; }

 private:
  struct UpUnit {
    ResBlock res{nullptr};
    SpatialTransformer attn{nullptr};
    torch::nn::Conv2d up{nullptr};
  };
  NetworkConfig cfg_;
  std::vector<UpUnit> up_units_;
  torch::nn::GroupNorm out_norm_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(UNet);

/// Zeros every parameter of a module in place.
void zero_parameters(torch::nn::Module& m);
/// Copies parameters and buffers with matching names from `src` into `dst`.
void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src);
/// Marks every parameter of a module as (non-)trainable.
void set_requires_grad(torch::nn::Module& m, bool flag);

}  // namespace diffsat
