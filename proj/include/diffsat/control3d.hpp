#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "diffsat/metadata.hpp"
#include "diffsat/networks.hpp"

namespace diffsat {

/// T conditioning frames with one metadata record each.
struct ControlSequence {
  torch::Tensor frames;  // [T, C, H, W] in [-1, 1]
  std::vector<MetadataRecord> frame_metadata;
  std::string caption;
  MetadataRecord target_metadata;

  int length() const { return static_cast<int>(frame_metadata.size()); }
  /// Throws ContractViolation when frames and metadata disagree.
  void validate() const;
};

struct ControlConfig {
  /// Channels of an input frame. Frames with image_channels channels go
  /// through the frozen VAE; any other count uses a trainable hint encoder.
  int frame_channels = 3;
  int hint_channels = 16;
  int n_md = 4;
  /// Frames per sequence (fixed only when stack_frames is set).
  int num_frames = 1;
  /// Temporal-layer convolution kernel (T, H, W); odd sizes, "same" padding.
  std::vector<int> temporal_kernel = {1, 3, 3};
  int temporal_heads = 4;
  /// 2D ablation: stack the frames along channels and skip temporal layers.
  bool stack_frames = false;

  bool operator==(const ControlConfig&) const = default;
};

void to_json(nlohmann::json& j, const ControlConfig& c);
void from_json(const nlohmann::json& j, ControlConfig& c);

/// Strided conv stack mapping full-resolution frames to the latent grid.
class HintEncoderImpl : public torch::nn::Module {
 public:
  HintEncoderImpl(int in_channels, int out_channels, int factor);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(HintEncoder);

/// Zero-initialized 3D convolution followed by a pixel-wise transformer over
/// the frame axis, mixed back in through the scalar alpha (initially 0).
class TemporalLayerImpl : public torch::nn::Module {
 public:
  TemporalLayerImpl(int channels, int heads, const std::vector<int>& kernel);

  /// `h` is [B*T, C, H, W] with frames of one sample contiguous.
  torch::Tensor forward(const torch::Tensor& h, int T);
  /// The gated branch before mixing, same shape as `h`.
  torch::Tensor branch(const torch::Tensor& h, int T);

  torch::Tensor alpha;
  torch::nn::Conv3d conv{nullptr};

 private:
  torch::nn::LayerNorm ln1_{nullptr}, ln2_{nullptr};
  Attention attn_{nullptr};
  FeedForward ff_{nullptr};
};
TORCH_MODULE(TemporalLayer);

/// Trainable copy of the denoiser's down and middle blocks that turns a
/// sequence of control frames into one residual per denoiser skip.
class ControlNet3dImpl : public torch::nn::Module {
 public:
  ControlNet3dImpl(const NetworkConfig& net, const ControlConfig& cfg);

  /// Copies the base denoiser's down path into the trainable copy.
  void init_from(UNetImpl& base);

  /// frames [B, T, C, H, W], normalized frame metadata [B, T, 7]
  /// -> control latent [B, T, C_lat + n_md, h, w].
  torch::Tensor encode_control(const torch::Tensor& frames, const torch::Tensor& frame_md,
                               VaeImpl& vae);
  /// Appends the projected per-frame metadata channels to already encoded
  /// frames [B, T, C_lat, h, w].
  torch::Tensor with_metadata(const torch::Tensor& frame_latents, const torch::Tensor& frame_md);

  /// One residual per down-path tap, shaped like the base denoiser's skips.
  std::vector<torch::Tensor> forward(const torch::Tensor& z_t, const torch::Tensor& cond,
                                     const TextEmbedding& text, const torch::Tensor& control);

  /// Channels of the encoded frame before the metadata channels.
  int latent_frame_channels() const;
  bool uses_vae() const { return !hint_; }

  const ControlConfig& config() const { return cfg_; }
  const NetworkConfig& network_config() const { return net_; }

  DownPath down{nullptr};
  torch::nn::Conv2d control_in{nullptr};
  MetadataEmbedder frame_metadata{nullptr};
  torch::nn::Linear md_proj{nullptr};
  std::vector<TemporalLayer> temporal;
  std::vector<torch::nn::Conv3d> zero_convs;

 private:
  NetworkConfig net_;
  ControlConfig cfg_;
  HintEncoder hint_{nullptr};
};
TORCH_MODULE(ControlNet3d);

}  // namespace diffsat
