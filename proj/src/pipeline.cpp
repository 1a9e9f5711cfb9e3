#include "diffsat/pipeline.hpp"

#include <fstream>

#include "diffsat/checkpoint.hpp"
#include "diffsat/errors.hpp"
#include "diffsat/image_io.hpp"
#include "diffsat/preprocess.hpp"

namespace diffsat {

using nlohmann::json;

Rng stream_rng(std::uint64_t seed, Stream s, std::uint64_t k) {
  return Rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(s)), k));
}

fs::path resolve_checkpoint_dir(const fs::path& p) {
  if (fs::exists(p / "manifest.json")) return p;
  if (fs::exists(p / "ckpt" / "manifest.json")) return p / "ckpt";
  throw DependencyError("no checkpoint found at " + p.string());
}

namespace {

RunConfig config_from_meta(const Checkpoint& ck) {
  const auto& meta = ck.meta();
  if (!meta.contains("task") || !meta.contains("config"))
    throw DataError("checkpoint " + ck.dir().string() + " has no task/config metadata");
  RunConfig c = default_run_config(parse_task(meta["task"].get<std::string>()));
  apply_json(c, meta["config"]);
  return c;
}

void freeze(torch::nn::Module& m) { set_requires_grad(m, false); }

}  // namespace

Vae load_vae(const fs::path& dir, std::string* hash, RunConfig* config) {
  auto ck = Checkpoint::load(resolve_checkpoint_dir(dir));
  const auto cfg = config_from_meta(ck);
  if (!ck.has_group("vae"))
    throw DependencyError("checkpoint " + ck.dir().string() + " holds no stage-0 VAE");
  Vae vae(cfg.net);
  ck.load_module("vae", *vae);
  freeze(*vae);
  if (hash) *hash = ck.content_hash();
  if (config) *config = cfg;
  return vae;
}

BaseModel BaseModel::create(const RunConfig& cfg, Vae vae) {
  BaseModel m;
  m.config = cfg;
  m.vae = std::move(vae);
  freeze(*m.vae);
  torch::manual_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(Stream::kInit)));
  m.text = TextEncoder(cfg.net);
  m.unet = UNet(cfg.net);
  m.conditioner = Conditioner(cfg.net.proj_dim, cfg.net.cond_dim);
  freeze(*m.text);
  m.schedule = cfg.build_noise_schedule();
  return m;
}

BaseModel BaseModel::load(const fs::path& dir) {
  auto ck = Checkpoint::load(resolve_checkpoint_dir(dir));
  const auto cfg = config_from_meta(ck);
  if (cfg.task != Task::kSingleImage)
    throw DependencyError("checkpoint " + ck.dir().string() + " is a " + to_string(cfg.task) +
                          " checkpoint, expected a single_image base model");
  BaseModel m;
  m.config = cfg;
  m.vae = Vae(cfg.net);
  m.text = TextEncoder(cfg.net);
  m.unet = UNet(cfg.net);
  m.conditioner = Conditioner(cfg.net.proj_dim, cfg.net.cond_dim);
  ck.load_module("vae", *m.vae);
  ck.load_module("text", *m.text);
  ck.load_module("unet", *m.unet);
  ck.load_module("conditioner", *m.conditioner);
  freeze(*m.vae);
  freeze(*m.text);
  m.schedule = cfg.build_noise_schedule();
  m.hash = ck.content_hash();
  return m;
}

TextEmbedding BaseModel::encode_text(const std::vector<std::string>& captions) {
  torch::NoGradGuard ng;
  std::vector<std::string> missing;
  for (const auto& c : captions)
    if (!text_cache_.count(c) && std::find(missing.begin(), missing.end(), c) == missing.end())
      missing.push_back(c);
  if (!missing.empty()) {
    auto e = text->encode(missing);
    for (std::size_t i = 0; i < missing.size(); ++i)
      text_cache_[missing[i]] = {e.tokens[static_cast<std::int64_t>(i)].clone(),
                                 e.mask[static_cast<std::int64_t>(i)].clone()};
  }
  std::vector<torch::Tensor> tok, mask;
  for (const auto& c : captions) {
    const auto& [t, m] = text_cache_.at(c);
    tok.push_back(t);
    mask.push_back(m);
  }
  return {torch::stack(tok), torch::stack(mask)};
}

std::vector<std::string> BaseModel::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& p : unet->named_parameters(true)) out.push_back("unet." + p.key());
  for (const auto& p : conditioner->named_parameters(true)) out.push_back("conditioner." + p.key());
  return out;
}

std::vector<torch::Tensor> BaseModel::trainable_parameters() const {
  auto out = unet->parameters(true);
  for (auto& p : conditioner->parameters(true)) out.push_back(p);
  return out;
}

ControlModel ControlModel::create(const RunConfig& cfg, BaseModel& base) {
  if (!(cfg.net == base.config.net))
    throw ConfigError("control config net.* settings differ from the base checkpoint's "
                      "(cond dim, VAE factor and widths must match)");
  ControlModel m;
  m.config = cfg;
  m.base_hash = base.hash;
  torch::manual_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(Stream::kInit)));
  m.net = ControlNet3d(cfg.net, cfg.control);
  m.net->init_from(*base.unet);
  return m;
}

ControlModel ControlModel::load(const fs::path& dir, BaseModel& base) {
  auto ck = Checkpoint::load(resolve_checkpoint_dir(dir));
  const auto cfg = config_from_meta(ck);
  if (!is_control_task(cfg.task))
    throw DependencyError("checkpoint " + ck.dir().string() + " is not a control checkpoint");
  const auto want = ck.meta().value("base_hash", std::string());
  if (!base.hash.empty() && want != base.hash)
    throw DependencyError("control checkpoint was trained against base " + want.substr(0, 16) +
                          ", but the given base is " + base.hash.substr(0, 16));
  if (!(cfg.net == base.config.net))
    throw ConfigError("control checkpoint network config differs from the base");
  ControlModel m;
  m.config = cfg;
  m.base_hash = want;
  m.net = ControlNet3d(cfg.net, cfg.control);
  ck.load_module("control", *m.net);
  return m;
}

bool MetadataInput::any() const {
  for (bool p : present)
    if (p) return true;
  return false;
}

torch::Tensor sample_batch(BaseModel& base, ControlModel* control, const SampleBatch& batch,
                           const SampleOptions& opts) {
  torch::NoGradGuard ng;
  const auto B = static_cast<std::int64_t>(batch.captions.size());
  DIFFSAT_EXPECT(B > 0, "sample batch is empty");
  DIFFSAT_EXPECT(static_cast<std::int64_t>(batch.metadata.size()) == B,
                 "one metadata input per caption required");
  DIFFSAT_EXPECT(!control || batch.control.defined(), "control sampling needs control latents");
  DIFFSAT_EXPECT(!batch.control.defined() || batch.control.size(0) == B,
                 "control latents must have one row per sample");
  const auto& net = base.config.net;

  std::vector<MetadataRecord> recs;
  std::vector<float> fmask, keep;
  for (const auto& m : batch.metadata) {
    recs.push_back(m.record);
    for (bool p : m.present) fmask.push_back(p ? 1.f : 0.f);
    keep.push_back(m.any() ? 1.f : 0.f);
  }
  auto normalized = normalized_batch(recs);
  auto field_mask = torch::tensor(fmask).reshape({B, kNumMetadataFields});
  auto keep_t = torch::tensor(keep);
  auto null_keep = torch::zeros({B});

  auto text_c = base.encode_text(batch.captions);
  TextEmbedding text_u;
  const bool guided = opts.guidance != 1.0;
  if (guided) text_u = base.encode_text(std::vector<std::string>(batch.captions.size(), ""));

  auto rng = stream_rng(opts.seed, Stream::kSample, 0);
  auto z = rng.normal({B, net.latent_channels, net.latent_size(), net.latent_size()});
  const auto ts = ddim_timesteps(base.schedule.num_steps, opts.steps);
  for (int i = 0; i < opts.steps; ++i) {
    const int t = ts[i], t_prev = ts[i + 1];
    auto tt = torch::full({B}, static_cast<float>(t));
    auto cond = base.conditioner(normalized, tt, keep_t, field_mask);
    std::vector<torch::Tensor> res;
    if (control) res = control->net(z, cond, text_c, batch.control);
    auto pred = base.unet(z, cond, text_c, res);
    if (guided) {
      auto cond_u = base.conditioner(normalized, tt, null_keep);
      std::vector<torch::Tensor> res_u;
      if (control) res_u = control->net(z, cond_u, text_u, batch.control);
      pred = cfg_combine(base.unet(z, cond_u, text_u, res_u), pred, opts.guidance);
    }
    torch::Tensor noise;
    if (opts.eta > 0.0) noise = rng.normal(z.sizes());
    z = ddim_step(z, pred, t, t_prev, base.config.prediction, base.schedule, opts.eta, noise);
  }
  auto img = base.vae->decode(z);
  if (!torch::isfinite(img).all().item<bool>())
    throw NumericalError("sampling produced non-finite values");
  return img.clamp(-1.0, 1.0);
}

torch::Tensor sample_single(BaseModel& base, const std::string& caption, const MetadataInput& md,
                            const SampleOptions& opts) {
  DIFFSAT_EXPECT(opts.n >= 1, "n must be >= 1");
  SampleBatch b;
  b.captions.assign(static_cast<std::size_t>(opts.n), caption);
  b.metadata.assign(static_cast<std::size_t>(opts.n), md);
  return sample_batch(base, nullptr, b, opts);
}

torch::Tensor encode_sequences(BaseModel& base, ControlModel& control,
                               const std::vector<ControlSequence>& seqs) {
  torch::NoGradGuard ng;
  DIFFSAT_EXPECT(!seqs.empty(), "no control sequences");
  const int size = base.config.net.image_size;
  std::vector<torch::Tensor> frames, mds;
  for (const auto& s : seqs) {
    s.validate();
    DIFFSAT_EXPECT(s.length() == seqs.front().length(), "control sequences differ in length");
    auto f = s.frames.to(torch::kFloat32);
    if (f.size(2) != size || f.size(3) != size) f = resize_control(f, size);
    frames.push_back(f);
    mds.push_back(normalized_batch(s.frame_metadata));
  }
  return control.net->encode_control(torch::stack(frames), torch::stack(mds), *base.vae);
}

torch::Tensor sample_conditional(BaseModel& base, ControlModel& control,
                                 const ControlSequence& seq, const SampleOptions& opts) {
  DIFFSAT_EXPECT(opts.n >= 1, "n must be >= 1");
  auto lat = encode_sequences(base, control, {seq});
  SampleBatch b;
  b.captions.assign(static_cast<std::size_t>(opts.n), seq.caption);
  b.metadata.assign(static_cast<std::size_t>(opts.n), MetadataInput{seq.target_metadata});
  b.control = lat.expand({opts.n, lat.size(1), lat.size(2), lat.size(3), lat.size(4)}).contiguous();
  return sample_batch(base, &control, b, opts);
}

AutoregressiveResult autoregressive_generate(BaseModel& base, ControlModel& control,
                                             const std::string& caption,
                                             const std::vector<MetadataRecord>& metadata_seq,
                                             const SampleOptions& opts) {
  DIFFSAT_EXPECT(!metadata_seq.empty(), "autoregressive generation needs at least one target");
  SampleOptions one = opts;
  one.n = 1;
  std::vector<torch::Tensor> images;
  AutoregressiveResult out;

  out.trace.push_back({0, opts.seed, metadata_seq[0], {}});
  images.push_back(sample_single(base, caption, MetadataInput{metadata_seq[0]}, one)[0]);

  for (std::size_t k = 1; k < metadata_seq.size(); ++k) {
    std::vector<Frame> frames;
    for (std::size_t j = 0; j < k; ++j) frames.push_back({images[j], metadata_seq[j]});
    PadOptions pad;
    pad.target_length = control.config.temporal_frames;
    pad.min_frames = 1;
    pad.target_date = metadata_seq[k];
    auto padded = pad_sequence(frames, pad);
    DIFFSAT_EXPECT(padded.has_value(), "padding failed");

    AutoregressiveStep step;
    step.index = static_cast<int>(k);
    step.seed = mix_seed(opts.seed, k);
    step.target = metadata_seq[k];
    ControlSequence seq;
    std::vector<torch::Tensor> imgs;
    for (const auto& f : *padded) {
      for (std::size_t j = 0; j < k; ++j)
        if (f.image.unsafeGetTensorImpl() == images[j].unsafeGetTensorImpl()) {
          step.conditioning.push_back(static_cast<int>(j));
          break;
        }
      imgs.push_back(f.image);
      seq.frame_metadata.push_back(f.metadata);
    }
    seq.frames = torch::stack(imgs);
    seq.caption = caption;
    seq.target_metadata = metadata_seq[k];
    one.seed = step.seed;
    images.push_back(sample_conditional(base, control, seq, one)[0]);
    out.trace.push_back(step);
  }
  out.images = torch::stack(images);
  return out;
}

void write_trace_jsonl(const fs::path& path, const std::vector<AutoregressiveStep>& trace) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DependencyError("cannot write " + path.string());
  for (const auto& s : trace) {
    json md;
    const auto v = s.target.values();
    for (int i = 0; i < kNumMetadataFields; ++i) md[std::string(kMetadataFieldNames[i])] = v[i];
    out << json{{"step", s.index}, {"seed", s.seed}, {"target", md},
                {"conditioning", s.conditioning}}
               .dump()
        << "\n";
  }
}

}  // namespace diffsat
