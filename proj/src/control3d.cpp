#include "diffsat/control3d.hpp"

#include <cmath>

#include "diffsat/errors.hpp"

namespace diffsat {

namespace nn = torch::nn;

void ControlSequence::validate() const {
  DIFFSAT_EXPECT(frames.defined() && frames.dim() == 4, "control frames must be [T, C, H, W]");
  DIFFSAT_EXPECT(frames.size(0) == static_cast<std::int64_t>(frame_metadata.size()),
                 "control sequence needs exactly one metadata record per frame (" +
                     std::to_string(frames.size(0)) + " frames, " +
                     std::to_string(frame_metadata.size()) + " records)");
  DIFFSAT_EXPECT(!frame_metadata.empty(), "control sequence is empty");
}

void to_json(nlohmann::json& j, const ControlConfig& c) {
  j = nlohmann::json{{"frame_channels", c.frame_channels},
                     {"hint_channels", c.hint_channels},
                     {"n_md", c.n_md},
                     {"num_frames", c.num_frames},
                     {"temporal_kernel", c.temporal_kernel},
                     {"temporal_heads", c.temporal_heads},
                     {"stack_frames", c.stack_frames}};
}

void from_json(const nlohmann::json& j, ControlConfig& c) {
  ControlConfig d;
  c.frame_channels = j.value("frame_channels", d.frame_channels);
  c.hint_channels = j.value("hint_channels", d.hint_channels);
  c.n_md = j.value("n_md", d.n_md);
  c.num_frames = j.value("num_frames", d.num_frames);
  c.temporal_kernel = j.value("temporal_kernel", d.temporal_kernel);
  c.temporal_heads = j.value("temporal_heads", d.temporal_heads);
  c.stack_frames = j.value("stack_frames", d.stack_frames);
}

HintEncoderImpl::HintEncoderImpl(int in_channels, int out_channels, int factor) {
  body_ = nn::Sequential();
  int ch = 16;
  body_->push_back(nn::Conv2d(nn::Conv2dOptions(in_channels, ch, 3).padding(1)));
  body_->push_back(nn::SiLU());
  for (int f = factor; f > 1; f /= 2) {
    const int next = std::min(ch * 2, 64);
    body_->push_back(nn::Conv2d(nn::Conv2dOptions(ch, next, 3).stride(2).padding(1)));
    body_->push_back(nn::SiLU());
    ch = next;
  }
  body_->push_back(nn::Conv2d(nn::Conv2dOptions(ch, out_channels, 3).padding(1)));
  register_module("body", body_);
}

torch::Tensor HintEncoderImpl::forward(const torch::Tensor& x) { return body_->forward(x); }

TemporalLayerImpl::TemporalLayerImpl(int channels, int heads, const std::vector<int>& kernel) {
  DIFFSAT_EXPECT(kernel.size() == 3, "temporal kernel needs three sizes");
  for (int k : kernel)
    if (k < 1 || k % 2 == 0) throw ConfigError("temporal kernel sizes must be odd and positive");
  conv = register_module(
      "conv", nn::Conv3d(nn::Conv3dOptions(channels, channels, {kernel[0], kernel[1], kernel[2]})
                             .padding({kernel[0] / 2, kernel[1] / 2, kernel[2] / 2})));
  zero_parameters(*conv);
  ln1_ = register_module("ln1", nn::LayerNorm(nn::LayerNormOptions({channels})));
  attn_ = register_module("attn", Attention(channels, channels, heads));
  ln2_ = register_module("ln2", nn::LayerNorm(nn::LayerNormOptions({channels})));
  ff_ = register_module("ff", FeedForward(channels));
  alpha = register_parameter("alpha", torch::zeros({1}));
}

torch::Tensor TemporalLayerImpl::branch(const torch::Tensor& h, int T) {
  DIFFSAT_EXPECT(T >= 1 && h.size(0) % T == 0,
                 "temporal layer: leading dimension " + std::to_string(h.size(0)) +
                     " is not divisible by T=" + std::to_string(T));
  const auto B = h.size(0) / T, C = h.size(1), H = h.size(2), W = h.size(3);
  auto x = h.reshape({B, T, C, H, W}).permute({0, 2, 1, 3, 4});  // [B, C, T, H, W]
  x = x + conv(x);
  // One sequence of length T per (sample, pixel); no positional encoding.
  auto seq = x.permute({0, 3, 4, 2, 1}).reshape({B * H * W, T, C});
  auto n1 = ln1_(seq);
  seq = seq + attn_(n1, n1);
  seq = seq + ff_(ln2_(seq));
  return seq.reshape({B, H, W, T, C}).permute({0, 3, 4, 1, 2}).reshape({B * T, C, H, W});
}

torch::Tensor TemporalLayerImpl::forward(const torch::Tensor& h, int T) {
  return h + alpha * branch(h, T);
}

ControlNet3dImpl::ControlNet3dImpl(const NetworkConfig& net, const ControlConfig& cfg)
    : net_(net), cfg_(cfg) {
  net_.validate();
  if (cfg_.n_md < 0) throw ConfigError("n_md must be >= 0");
  if (cfg_.frame_channels < 1) throw ConfigError("frame_channels must be >= 1");
  if (cfg_.stack_frames && cfg_.num_frames < 1)
    throw ConfigError("stacked control needs a fixed num_frames");

  down = register_module("down", DownPath(net_));
  if (cfg_.frame_channels != net_.image_channels)
    hint_ = register_module("hint", HintEncoder(cfg_.frame_channels, cfg_.hint_channels,
                                                net_.vae_factor));
  frame_metadata =
      register_module("frame_metadata", MetadataEmbedder(net_.proj_dim, net_.cond_dim, false));
  if (cfg_.n_md > 0) md_proj = register_module("md_proj", nn::Linear(net_.cond_dim, cfg_.n_md));

  const int per_frame = latent_frame_channels() + cfg_.n_md;
  const int in_ch = cfg_.stack_frames ? per_frame * cfg_.num_frames : per_frame;
  const int base = down->tap_shapes().front().channels;
  control_in = register_module("control_in",
                               nn::Conv2d(nn::Conv2dOptions(in_ch, base, 3).padding(1)));
  zero_parameters(*control_in);

  const auto& taps = down->tap_shapes();
  if (!cfg_.stack_frames) {
    // One temporal layer after every down unit and after the middle block.
    for (std::size_t i = 1; i < taps.size(); ++i)
      temporal.push_back(register_module(
          "temporal" + std::to_string(i),
          TemporalLayer(taps[i].channels, cfg_.temporal_heads, cfg_.temporal_kernel)));
  }
  for (std::size_t i = 0; i < taps.size(); ++i) {
    auto z = nn::Conv3d(nn::Conv3dOptions(taps[i].channels, taps[i].channels, 1));
    zero_parameters(*z);
    zero_convs.push_back(register_module("zero" + std::to_string(i), z));
  }
}

int ControlNet3dImpl::latent_frame_channels() const {
  return hint_ ? cfg_.hint_channels : net_.latent_channels;
}

void ControlNet3dImpl::init_from(UNetImpl& base) {
  DIFFSAT_EXPECT(base.config() == net_, "control branch and base denoiser configs differ");
  copy_parameters(*down, *base.down);
}

torch::Tensor ControlNet3dImpl::encode_control(const torch::Tensor& frames,
                                               const torch::Tensor& frame_md, VaeImpl& vae) {
  DIFFSAT_EXPECT(frames.dim() == 5, "control frames must be [B, T, C, H, W]");
  DIFFSAT_EXPECT(frame_md.dim() == 3 && frame_md.size(0) == frames.size(0) &&
                     frame_md.size(1) == frames.size(1),
                 "frame metadata must be [B, T, 7] matching the frames");
  DIFFSAT_EXPECT(frames.size(2) == cfg_.frame_channels,
                 "control frames have " + std::to_string(frames.size(2)) + " channels, expected " +
                     std::to_string(cfg_.frame_channels));
  const auto B = frames.size(0), T = frames.size(1);
  auto flat = frames.reshape({B * T, frames.size(2), frames.size(3), frames.size(4)});
  torch::Tensor lat;
  if (hint_) {
    lat = hint_(flat);
  } else {
    torch::NoGradGuard ng;
    lat = vae.encode(flat);
  }
  return with_metadata(lat.reshape({B, T, lat.size(1), lat.size(2), lat.size(3)}), frame_md);
}

torch::Tensor ControlNet3dImpl::with_metadata(const torch::Tensor& frame_latents,
                                              const torch::Tensor& frame_md) {
  DIFFSAT_EXPECT(frame_latents.dim() == 5, "frame latents must be [B, T, C, h, w]");
  DIFFSAT_EXPECT(frame_latents.size(2) == latent_frame_channels(),
                 "frame latents have the wrong channel count");
  const auto B = frame_latents.size(0), T = frame_latents.size(1);
  const auto h = frame_latents.size(3), w = frame_latents.size(4);
  auto lat = frame_latents.reshape({B * T, frame_latents.size(2), h, w});
  if (cfg_.n_md > 0) {
    auto emb = frame_metadata(frame_md.reshape({B * T, frame_md.size(2)}).to(lat.scalar_type()));
    auto md = md_proj(emb).reshape({B * T, cfg_.n_md, 1, 1}).expand({B * T, cfg_.n_md, h, w});
    lat = torch::cat({lat, md}, 1);
  }
  return lat.reshape({B, T, lat.size(1), h, w});
}

std::vector<torch::Tensor> ControlNet3dImpl::forward(const torch::Tensor& z_t,
                                                     const torch::Tensor& cond,
                                                     const TextEmbedding& text,
                                                     const torch::Tensor& control) {
  DIFFSAT_EXPECT(control.dim() == 5 && control.size(0) == z_t.size(0),
                 "control latent must be [B, T, C, h, w] with the denoiser's batch size");
  DIFFSAT_EXPECT(control.size(3) == z_t.size(2) && control.size(4) == z_t.size(3),
                 "control latent resolution does not match the noisy latent");
  const auto B = z_t.size(0);
  torch::Tensor ctrl = control;
  int T = static_cast<int>(control.size(1));
  if (cfg_.stack_frames) {
    DIFFSAT_EXPECT(T == cfg_.num_frames, "stacked control expects num_frames frames");
    ctrl = control.reshape({B, 1, -1, control.size(3), control.size(4)});
    T = 1;
  }
  auto flat = ctrl.reshape({B * T, ctrl.size(2), ctrl.size(3), ctrl.size(4)});
  auto h = down->conv_in(z_t).repeat_interleave(T, 0) + control_in(flat);

  auto cond_t = cond.repeat_interleave(T, 0);
  TextEmbedding text_t{text.tokens.repeat_interleave(T, 0), text.mask.repeat_interleave(T, 0)};
  UnitHook hook;
  if (!temporal.empty())
    hook = [&](int tap, const torch::Tensor& x) { return temporal[tap - 1](x, T); };
  auto taps = down->run(h, cond_t, text_t, hook);

  std::vector<torch::Tensor> out;
  out.reserve(taps.size());
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const auto& x = taps[i];
    auto x5 = x.reshape({B, T, x.size(1), x.size(2), x.size(3)}).permute({0, 2, 1, 3, 4});
    out.push_back(zero_convs[i](x5).mean(2));
  }
  return out;
}

}  // namespace diffsat
