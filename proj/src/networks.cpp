#include "diffsat/networks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "diffsat/errors.hpp"

namespace diffsat {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

void NetworkConfig::validate() const {
  auto is_pow2 = [](int v) { return v > 0 && (v & (v - 1)) == 0; };
  if (!is_pow2(vae_factor)) throw ConfigError("vae_factor must be a power of two");
  if (image_size % vae_factor != 0) throw ConfigError("image_size must be a multiple of vae_factor");
  const int stages = static_cast<int>(std::log2(vae_factor));
  if (static_cast<int>(vae_channels.size()) != stages + 1)
    throw ConfigError("vae_channels must have log2(vae_factor) + 1 entries");
  if (channel_mults.empty()) throw ConfigError("channel_mults must not be empty");
  const int levels = static_cast<int>(channel_mults.size());
  if (latent_size() % (1 << (levels - 1)) != 0)
    throw ConfigError("latent size must be divisible by 2^(levels-1)");
  if (proj_dim <= 0 || proj_dim % 2 != 0) throw ConfigError("proj_dim must be positive and even");
  if (num_res_blocks < 1) throw ConfigError("num_res_blocks must be >= 1");
  for (int m : channel_mults)
    if ((base_channels * m) % heads != 0) throw ConfigError("UNet widths must be divisible by heads");
  if (text_dim % heads != 0) throw ConfigError("text_dim must be divisible by heads");
  if (text_len < 2) throw ConfigError("text_len must be >= 2");
  if (vocab_size < 3) throw ConfigError("vocab_size must be >= 3");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"image_channels", c.image_channels},
                     {"latent_channels", c.latent_channels},
                     {"vae_factor", c.vae_factor},
                     {"vae_channels", c.vae_channels},
                     {"base_channels", c.base_channels},
                     {"channel_mults", c.channel_mults},
                     {"attention_resolutions", c.attention_resolutions},
                     {"num_res_blocks", c.num_res_blocks},
                     {"heads", c.heads},
                     {"norm_groups", c.norm_groups},
                     {"cond_dim", c.cond_dim},
                     {"proj_dim", c.proj_dim},
                     {"text_dim", c.text_dim},
                     {"text_len", c.text_len},
                     {"vocab_size", c.vocab_size},
                     {"text_layers", c.text_layers}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  NetworkConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.image_channels = j.value("image_channels", d.image_channels);
  c.latent_channels = j.value("latent_channels", d.latent_channels);
  c.vae_factor = j.value("vae_factor", d.vae_factor);
  c.vae_channels = j.value("vae_channels", d.vae_channels);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.channel_mults = j.value("channel_mults", d.channel_mults);
  c.attention_resolutions = j.value("attention_resolutions", d.attention_resolutions);
  c.num_res_blocks = j.value("num_res_blocks", d.num_res_blocks);
  c.heads = j.value("heads", d.heads);
  c.norm_groups = j.value("norm_groups", d.norm_groups);
  c.cond_dim = j.value("cond_dim", d.cond_dim);
  c.proj_dim = j.value("proj_dim", d.proj_dim);
  c.text_dim = j.value("text_dim", d.text_dim);
  c.text_len = j.value("text_len", d.text_len);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.text_layers = j.value("text_layers", d.text_layers);
}

// ---------------------------------------------------------------------------

nn::GroupNorm group_norm(int channels, int groups) {
  return nn::GroupNorm(nn::GroupNormOptions(std::gcd(channels, groups), channels).eps(1e-6));
}

namespace {

nn::Conv2d conv3x3(int in, int out, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

nn::Conv2d conv1x1(int in, int out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 1)); }

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kNearest));
}

}  // namespace

torch::Tensor multi_head_attention(const torch::Tensor& q, const torch::Tensor& k,
                                   const torch::Tensor& v, int heads,
                                   const torch::Tensor& key_mask) {
  const auto B = q.size(0), Lq = q.size(1), C = q.size(2), Lk = k.size(1);
  DIFFSAT_EXPECT(C % heads == 0, "attention width must be divisible by heads");
  const auto dh = C / heads;
  auto split = [&](const torch::Tensor& t, std::int64_t L) {
    return t.reshape({B, L, heads, dh}).transpose(1, 2);
  };
  auto qh = split(q, Lq), kh = split(k, Lk), vh = split(v, Lk);
  auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  if (key_mask.defined()) {
    auto m = key_mask.to(torch::kBool).reshape({B, 1, 1, Lk});
    scores = scores.masked_fill(m.logical_not(), -std::numeric_limits<double>::infinity());
  }
  auto out = torch::matmul(torch::softmax(scores, -1), vh);
  return out.transpose(1, 2).reshape({B, Lq, C});
}

AttentionImpl::AttentionImpl(int query_dim, int context_dim, int heads) : heads_(heads) {
  to_q_ = register_module("to_q", nn::Linear(nn::LinearOptions(query_dim, query_dim).bias(false)));
  to_k_ = register_module("to_k", nn::Linear(nn::LinearOptions(context_dim, query_dim).bias(false)));
  to_v_ = register_module("to_v", nn::Linear(nn::LinearOptions(context_dim, query_dim).bias(false)));
  to_out_ = register_module("to_out", nn::Linear(query_dim, query_dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context,
                                     const torch::Tensor& context_mask) {
  auto out = multi_head_attention(to_q_(x), to_k_(context), to_v_(context), heads_, context_mask);
  return to_out_(out);
}

FeedForwardImpl::FeedForwardImpl(int dim, int mult) {
  fc1_ = register_module("fc1", nn::Linear(dim, dim * mult));
  fc2_ = register_module("fc2", nn::Linear(dim * mult, dim));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) {
  return fc2_(torch::gelu(fc1_(x)));
}

ResBlockImpl::ResBlockImpl(int in_ch, int out_ch, int emb_dim, int groups) {
  norm1_ = register_module("norm1", group_norm(in_ch, groups));
  conv1_ = register_module("conv1", conv3x3(in_ch, out_ch));
  if (emb_dim > 0) emb_proj_ = register_module("emb_proj", nn::Linear(emb_dim, out_ch));
  norm2_ = register_module("norm2", group_norm(out_ch, groups));
  conv2_ = register_module("conv2", conv3x3(out_ch, out_ch));
  if (in_ch != out_ch) skip_ = register_module("skip", conv1x1(in_ch, out_ch));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1_(torch::silu(norm1_(x)));
  if (emb_proj_ && emb.defined()) h = h + emb_proj_(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(torch::silu(norm2_(h)));
  return (skip_ ? skip_(x) : x) + h;
}

SpatialTransformerImpl::SpatialTransformerImpl(int channels, int context_dim, int heads,
                                               int groups) {
  norm_ = register_module("norm", group_norm(channels, groups));
  proj_in_ = register_module("proj_in", conv1x1(channels, channels));
  ln1_ = register_module("ln1", nn::LayerNorm(nn::LayerNormOptions({channels})));
  ln2_ = register_module("ln2", nn::LayerNorm(nn::LayerNormOptions({channels})));
  ln3_ = register_module("ln3", nn::LayerNorm(nn::LayerNormOptions({channels})));
  self_attn_ = register_module("self_attn", Attention(channels, channels, heads));
  cross_attn_ = register_module("cross_attn", Attention(channels, context_dim, heads));
  ff_ = register_module("ff", FeedForward(channels));
  proj_out_ = register_module("proj_out", conv1x1(channels, channels));
}

torch::Tensor SpatialTransformerImpl::forward(const torch::Tensor& x, const torch::Tensor& context,
                                              const torch::Tensor& context_mask) {
  const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  auto h = proj_in_(norm_(x)).flatten(2).transpose(1, 2);  // [B, HW, C]
  auto n1 = ln1_(h);
  h = h + self_attn_(n1, n1);
  h = h + cross_attn_(ln2_(h), context, context_mask);
  h = h + ff_(ln3_(h));
  h = h.transpose(1, 2).reshape({B, C, H, W});
  return x + proj_out_(h);
}

// ---------------------------------------------------------------------------
// VAE

VaeImpl::VaeImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto& ch = cfg_.vae_channels;
  const int stages = static_cast<int>(ch.size()) - 1;
  const int g = cfg_.norm_groups;
  const int C = cfg_.latent_channels;

  // Residual blocks only at resolutions <= 16 keep full-resolution cost low.
  auto wants_res = [&](int size) { return size <= 16; };

  encoder_ = nn::Sequential();
  encoder_->push_back(conv3x3(cfg_.image_channels, ch[0]));
  int size = cfg_.image_size;
  for (int s = 0; s < stages; ++s) {
    encoder_->push_back(conv3x3(ch[s], ch[s + 1], 2));
    size /= 2;
    encoder_->push_back(group_norm(ch[s + 1], g));
    encoder_->push_back(nn::SiLU());
    if (wants_res(size)) encoder_->push_back(ResBlock(ch[s + 1], ch[s + 1], 0, g));
  }
  encoder_->push_back(ResBlock(ch[stages], ch[stages], 0, g));
  encoder_->push_back(group_norm(ch[stages], g));
  encoder_->push_back(nn::SiLU());
  encoder_->push_back(conv3x3(ch[stages], 2 * C));
  register_module("encoder", encoder_);

  decoder_ = nn::Sequential();
  decoder_->push_back(conv3x3(C, ch[stages]));
  decoder_->push_back(ResBlock(ch[stages], ch[stages], 0, g));
  size = cfg_.latent_size();
  for (int s = stages - 1; s >= 0; --s) {
    decoder_->push_back(nn::Upsample(nn::UpsampleOptions()
                                         .scale_factor(std::vector<double>{2.0, 2.0})
                                         .mode(torch::kNearest)));
    size *= 2;
    decoder_->push_back(conv3x3(ch[s + 1], ch[s]));
    decoder_->push_back(group_norm(ch[s], g));
    decoder_->push_back(nn::SiLU());
    if (wants_res(size)) decoder_->push_back(ResBlock(ch[s], ch[s], 0, g));
  }
  decoder_->push_back(conv3x3(ch[0], cfg_.image_channels));
  decoder_->push_back(nn::Tanh());
  register_module("decoder", decoder_);

  latent_scale_ = register_buffer("latent_scale", torch::ones({1}));
}

VaeImpl::Posterior VaeImpl::encode_posterior(const torch::Tensor& x) {
  DIFFSAT_EXPECT(x.dim() == 4 && x.size(1) == cfg_.image_channels,
                 "vae_encode expects [B, C, H, W] with the configured channel count");
  DIFFSAT_EXPECT(x.size(2) % cfg_.vae_factor == 0 && x.size(3) % cfg_.vae_factor == 0,
                 "image height and width must be multiples of the VAE factor");
  auto moments = encoder_->forward(x);
  auto parts = moments.chunk(2, 1);
  return {parts[0], parts[1].clamp(-30.0, 20.0)};
}

torch::Tensor VaeImpl::encode(const torch::Tensor& x) {
  return encode_posterior(x).mean * latent_scale_.to(x.scalar_type());
}

torch::Tensor VaeImpl::decode(const torch::Tensor& z) {
  return decode_unscaled(z / latent_scale_.to(z.scalar_type()));
}

torch::Tensor VaeImpl::decode_unscaled(const torch::Tensor& z) {
  DIFFSAT_EXPECT(z.dim() == 4 && z.size(1) == cfg_.latent_channels,
                 "vae_decode expects [B, C', h, w]");
  return decoder_->forward(z);
}

void VaeImpl::set_latent_scale(double s) {
  torch::NoGradGuard ng;
  latent_scale_.fill_(s);
}

// ---------------------------------------------------------------------------
// Text encoder

std::vector<std::string> tokenize_caption(std::string_view caption) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : caption) {
    const bool word = std::isalnum(ch) || ch >= 0x80;
    if (word) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

int hash_token(std::string_view token, int vocab_size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : token) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return 2 + static_cast<int>(h % static_cast<std::uint64_t>(vocab_size - 2));
}

TextEncoderImpl::TextEncoderImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  token_emb_ = register_module("token_emb", nn::Embedding(cfg.vocab_size, cfg.text_dim));
  pos_emb_ = register_module("pos_emb", nn::Embedding(cfg.text_len, cfg.text_dim));
  for (int i = 0; i < cfg.text_layers; ++i) {
    Layer l;
    const auto p = "layer" + std::to_string(i) + "_";
    l.ln1 = register_module(p + "ln1", nn::LayerNorm(nn::LayerNormOptions({cfg.text_dim})));
    l.attn = register_module(p + "attn", Attention(cfg.text_dim, cfg.text_dim, cfg.heads));
    l.ln2 = register_module(p + "ln2", nn::LayerNorm(nn::LayerNormOptions({cfg.text_dim})));
    l.ff = register_module(p + "ff", FeedForward(cfg.text_dim));
    layers_.push_back(l);
  }
  final_ln_ = register_module("final_ln", nn::LayerNorm(nn::LayerNormOptions({cfg.text_dim})));
}

torch::Tensor TextEncoderImpl::token_ids(const std::vector<std::string>& captions) const {
  const auto L = cfg_.text_len;
  auto ids = torch::zeros({static_cast<std::int64_t>(captions.size()), L}, torch::kLong);
  auto acc = ids.accessor<std::int64_t, 2>();
  for (std::size_t b = 0; b < captions.size(); ++b) {
    acc[static_cast<std::int64_t>(b)][0] = 1;
    const auto toks = tokenize_caption(captions[b]);
    for (std::size_t i = 0; i < toks.size() && static_cast<int>(i) + 1 < L; ++i)
      acc[static_cast<std::int64_t>(b)][static_cast<std::int64_t>(i) + 1] =
          hash_token(toks[i], cfg_.vocab_size);
  }
  return ids;
}

TextEmbedding TextEncoderImpl::encode(const std::vector<std::string>& captions) {
  auto ids = token_ids(captions);
  auto mask = ids.ne(0);
  auto pos = torch::arange(cfg_.text_len, torch::kLong);
  auto h = token_emb_(ids) + pos_emb_(pos).unsqueeze(0);
  for (auto& l : layers_) {
    auto n = l.ln1(h);
    h = h + l.attn(n, n, mask);
    h = h + l.ff(l.ln2(h));
  }
  return {final_ln_(h), mask};
}

// ---------------------------------------------------------------------------
// UNet

DownPathImpl::DownPathImpl(const NetworkConfig& cfg) {
  cfg.validate();
  const int levels = static_cast<int>(cfg.channel_mults.size());
  const int g = cfg.norm_groups;
  auto has_attn = [&](int size) {
    return std::find(cfg.attention_resolutions.begin(), cfg.attention_resolutions.end(), size) !=
           cfg.attention_resolutions.end();
  };
  int size = cfg.latent_size();
  int ch = cfg.base_channels * cfg.channel_mults[0];
  conv_in = register_module("conv_in", conv3x3(cfg.latent_channels, ch));
  tap_shapes_.push_back({ch, size});

  for (int l = 0; l < levels; ++l) {
    const int out = cfg.base_channels * cfg.channel_mults[l];
    for (int r = 0; r < cfg.num_res_blocks; ++r) {
      Unit u;
      const auto p = "unit" + std::to_string(units_.size()) + "_";
      u.res = register_module(p + "res", ResBlock(ch, out, cfg.cond_dim, g));
      if (has_attn(size))
        u.attn = register_module(p + "attn", SpatialTransformer(out, cfg.text_dim, cfg.heads, g));
      ch = out;
      units_.push_back(u);
      tap_shapes_.push_back({ch, size});
    }
    if (l + 1 < levels) {
      Unit u;
      u.down = register_module("unit" + std::to_string(units_.size()) + "_down", conv3x3(ch, ch, 2));
      size /= 2;
      units_.push_back(u);
      tap_shapes_.push_back({ch, size});
    }
  }
  mid1_ = register_module("mid_res1", ResBlock(ch, ch, cfg.cond_dim, g));
  if (has_attn(size))
    mid_attn_ = register_module("mid_attn", SpatialTransformer(ch, cfg.text_dim, cfg.heads, g));
  mid2_ = register_module("mid_res2", ResBlock(ch, ch, cfg.cond_dim, g));
  tap_shapes_.push_back({ch, size});
}

std::vector<torch::Tensor> DownPathImpl::run(torch::Tensor h, const torch::Tensor& emb,
                                             const TextEmbedding& text, const UnitHook& hook) {
  std::vector<torch::Tensor> taps;
  taps.reserve(units_.size() + 2);
  taps.push_back(h);
  int tap = 1;
  for (auto& u : units_) {
    if (u.down) {
      h = u.down(h);
    } else {
      h = u.res(h, emb);
      if (u.attn) h = u.attn(h, text.tokens, text.mask);
    }
    if (hook) h = hook(tap, h);
    taps.push_back(h);
    ++tap;
  }
  h = mid1_(h, emb);
  if (mid_attn_) h = mid_attn_(h, text.tokens, text.mask);
  h = mid2_(h, emb);
  if (hook) h = hook(tap, h);
  taps.push_back(h);
  return taps;
}

UNetImpl::UNetImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  down = register_module("down", DownPath(cfg));
  const int levels = static_cast<int>(cfg.channel_mults.size());
  const int g = cfg.norm_groups;
  auto has_attn = [&](int size) {
    return std::find(cfg.attention_resolutions.begin(), cfg.attention_resolutions.end(), size) !=
           cfg.attention_resolutions.end();
  };
  const auto& taps = down->tap_shapes();
  // Skip channels consumed in reverse order (the mid tap is not a skip).
  std::vector<int> skip_ch;
  for (std::size_t i = 0; i + 1 < taps.size(); ++i) skip_ch.push_back(taps[i].channels);

  int ch = taps.back().channels;
  int size = taps.back().size;
  for (int l = levels - 1; l >= 0; --l) {
    const int out = cfg.base_channels * cfg.channel_mults[l];
    for (int r = 0; r <= cfg.num_res_blocks; ++r) {
      const int sc = skip_ch.back();
      skip_ch.pop_back();
      UpUnit u;
      const auto p = "up" + std::to_string(up_units_.size()) + "_";
      u.res = register_module(p + "res", ResBlock(ch + sc, out, cfg.cond_dim, g));
      if (has_attn(size))
        u.attn = register_module(p + "attn", SpatialTransformer(out, cfg.text_dim, cfg.heads, g));
      ch = out;
      if (l > 0 && r == cfg.num_res_blocks) {
        u.up = register_module(p + "up", conv3x3(ch, ch));
        size *= 2;
      }
      up_units_.push_back(u);
    }
  }
  out_norm_ = register_module("out_norm", group_norm(ch, g));
  conv_out_ = register_module("conv_out", conv3x3(ch, cfg.latent_channels));
  zero_parameters(*conv_out_);
}

torch::Tensor UNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& cond,
                                const TextEmbedding& text,
                                const std::vector<torch::Tensor>& residuals) {
  DIFFSAT_EXPECT(z_t.dim() == 4 && z_t.size(1) == cfg_.latent_channels,
                 "denoiser expects [B, C', h, w] latents");
  auto taps = down->run(down->conv_in(z_t), cond, text);
  if (!residuals.empty()) {
    DIFFSAT_EXPECT(residuals.size() == taps.size(),
                   "expected " + std::to_string(taps.size()) + " residual tensors, got " +
                       std::to_string(residuals.size()));
    for (std::size_t i = 0; i < taps.size(); ++i) {
      DIFFSAT_EXPECT(residuals[i].sizes() == taps[i].sizes(),
                     "residual " + std::to_string(i) + " shape does not match its skip");
      taps[i] = taps[i] + residuals[i];
    }
  }
  auto h = taps.back();
  taps.pop_back();
  for (auto& u : up_units_) {
    auto skip = taps.back();
    taps.pop_back();
    h = u.res(torch::cat({h, skip}, 1), cond);
    if (u.attn) h = u.attn(h, text.tokens, text.mask);
    if (u.up) h = u.up(upsample2x(h));
  }
  return conv_out_(torch::silu(out_norm_(h)));
}

void zero_parameters(torch::nn::Module& m) {
  torch::NoGradGuard ng;
  for (auto& p : m.parameters()) p.zero_();
}

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard ng;
  auto src_params = src.named_parameters(true);
  for (auto& item : dst.named_parameters(true)) {
    const auto* s = src_params.find(item.key());
    DIFFSAT_EXPECT(s != nullptr, "copy_parameters: missing source tensor " + item.key());
    item.value().copy_(*s);
  }
  auto src_bufs = src.named_buffers(true);
  for (auto& item : dst.named_buffers(true)) {
    const auto* s = src_bufs.find(item.key());
    if (s) item.value().copy_(*s);
  }
}

void set_requires_grad(torch::nn::Module& m, bool flag) {
  for (auto& p : m.parameters()) p.set_requires_grad(flag);
}

}  // namespace diffsat
