#include "diffsat/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "diffsat/captions.hpp"
#include "diffsat/checkpoint.hpp"
#include "diffsat/errors.hpp"
#include "diffsat/image_io.hpp"
#include "diffsat/preprocess.hpp"
#include "diffsat/strings.hpp"

namespace diffsat {

using nlohmann::json;

EpochSampler::EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
  if (n == 0) throw DataError("no training records");
}

const std::vector<std::size_t>& EpochSampler::perm(std::int64_t epoch) {
  auto it = cache_.find(epoch);
  if (it != cache_.end()) return it->second;
  Rng r = stream_rng(mix_seed(seed_, 0xE90CULL), Stream::kData, static_cast<std::uint64_t>(epoch));
  std::vector<std::size_t> p(n_);
  for (std::size_t i = 0; i < n_; ++i) p[i] = i;
  for (std::size_t i = n_ - 1; i > 0; --i)
    std::swap(p[i], p[static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(i)))]);
  while (cache_.size() > 2) cache_.erase(cache_.begin());
  return cache_[epoch] = std::move(p);
}

std::vector<std::size_t> EpochSampler::indices(std::int64_t iter, int batch) {
  std::vector<std::size_t> out;
  const auto n = static_cast<std::int64_t>(n_);
  for (int b = 0; b < batch; ++b) {
    const std::int64_t p = iter * batch + b;
    out.push_back(perm(p / n)[static_cast<std::size_t>(p % n)]);
  }
  return out;
}

namespace {

torch::Tensor rows_tensor(const std::vector<std::size_t>& rows) {
  std::vector<std::int64_t> v(rows.begin(), rows.end());
  return torch::tensor(v, torch::kLong);
}

CaptionOptions caption_options(const RunConfig& cfg, bool with_dropout) {
  return {with_dropout ? cfg.caption_dropout : 0.0, cfg.metadata_in_caption};
}

// Tied null condition: one Bernoulli per sample zeroes the metadata vector and
// blanks the caption together.
void draw_conditioning(const std::vector<const ManifestRecord*>& recs, const RunConfig& cfg,
                       Rng& drop, DiffusionBatch& b) {
  std::vector<float> keep;
  for (const auto* r : recs) {
    const bool kept = !drop.bernoulli(cfg.metadata_dropout);
    keep.push_back(kept ? 1.f : 0.f);
    b.captions.push_back(kept ? build_caption(r->dataset_kind, r->labels, &drop,
                                              caption_options(cfg, true), &r->metadata)
                              : std::string());
    b.ids.push_back(r->id);
  }
  b.keep = torch::tensor(keep);
}

void draw_noise(const RunConfig& cfg, Rng& noise, DiffusionBatch& b) {
  const auto B = b.latents.size(0);
  std::vector<std::int64_t> t;
  for (std::int64_t i = 0; i < B; ++i) t.push_back(noise.uniform_int(1, cfg.num_train_steps));
  b.t = torch::tensor(t, torch::kLong);
  b.eps = noise.normal(b.latents.sizes());
}

torch::Tensor encode_latents(VaeImpl& vae, const torch::Tensor& images) {
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> out;
  for (std::int64_t i = 0; i < images.size(0); i += 32)
    out.push_back(vae.encode(images.slice(0, i, std::min<std::int64_t>(i + 32, images.size(0)))));
  return torch::cat(out);
}

SampleOptions preview_options(const RunConfig& cfg) {
  SampleOptions o;
  o.steps = cfg.sample_steps;
  o.guidance = cfg.guidance;
  o.eta = cfg.eta;
  o.seed = cfg.seed;
  return o;
}

}  // namespace

torch::Tensor control_latents(BaseModel& base, ControlModel& control, const ControlInput& in) {
  if (in.encoded) return control.net->with_metadata(in.frames, in.frame_md);
  return control.net->encode_control(in.frames, in.frame_md, *base.vae);
}

torch::Tensor diffusion_batch_loss(BaseModel& base, const DiffusionBatch& b, ControlModel* control,
                                   const ControlInput* in) {
  DIFFSAT_EXPECT(!control || in, "control loss needs control input");
  auto z_t = add_noise(b.latents, b.t, b.eps, base.schedule);
  auto target = compute_target(b.latents, b.eps, b.t, base.config.prediction, base.schedule);
  auto cond = base.conditioner(b.metadata, b.t.to(torch::kFloat32), b.keep);
  auto text = base.encode_text(b.captions);
  std::vector<torch::Tensor> res;
  if (control) res = control->net(z_t, cond, text, control_latents(base, *control, *in));
  return diffusion_loss(base.unet(z_t, cond, text, res), target);
}

torch::Tensor load_images(const Manifest& m, const std::vector<std::size_t>& rows, int size) {
  std::vector<torch::Tensor> imgs;
  for (auto r : rows) {
    const auto& rec = m.records.at(r);
    auto img = read_image(m.resolve(rec.image_path));
    if (img.size(1) != size || img.size(2) != size) img = resize_control(img, size);
    imgs.push_back(to_signed(img));
  }
  if (imgs.empty()) throw DataError("manifest " + m.path.string() + " has no usable records");
  return torch::stack(imgs);
}

std::vector<std::size_t> training_rows(const Manifest& m, int holdout) {
  const auto n = m.records.size();
  if (static_cast<std::size_t>(holdout) >= n)
    throw DataError("holdout " + std::to_string(holdout) + " leaves no training records");
  std::vector<std::size_t> rows(n - static_cast<std::size_t>(holdout));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return rows;
}

// ---------------------------------------------------------------------------

SingleImageData::SingleImageData(const Manifest& m, BaseModel& base, const RunConfig& cfg)
    : manifest_(m),
      cfg_(cfg),
      rows_(training_rows(m, cfg.holdout)),
      sampler_(rows_.size(), cfg.seed) {
  latents_ = encode_latents(*base.vae, load_images(m, rows_, cfg.net.image_size));
  std::vector<MetadataRecord> md;
  for (auto r : rows_) md.push_back(m.records[r].metadata);
  metadata_ = normalized_batch(md);
}

DiffusionBatch SingleImageData::batch(std::int64_t iter) {
  const auto idx = sampler_.indices(iter, cfg_.batch_size);
  auto drop = stream_rng(cfg_.seed, Stream::kDropout, static_cast<std::uint64_t>(iter));
  auto noise = stream_rng(cfg_.seed, Stream::kNoise, static_cast<std::uint64_t>(iter));
  DiffusionBatch b;
  auto sel = rows_tensor(idx);
  b.latents = latents_.index_select(0, sel);
  b.metadata = metadata_.index_select(0, sel);
  std::vector<const ManifestRecord*> recs;
  for (auto i : idx) recs.push_back(&manifest_.records[rows_[i]]);
  draw_conditioning(recs, cfg_, drop, b);
  draw_noise(cfg_, noise, b);
  return b;
}

SampleBatch SingleImageData::preview(int n) const {
  SampleBatch sb;
  for (std::size_t i = 0; i < rows_.size() && static_cast<int>(i) < n; ++i) {
    const auto& r = manifest_.records[rows_[i]];
    sb.captions.push_back(
        build_caption(r.dataset_kind, r.labels, nullptr, caption_options(cfg_, false), &r.metadata));
    sb.metadata.push_back(MetadataInput{r.metadata});
  }
  return sb;
}

// ---------------------------------------------------------------------------

ControlData::ControlData(const Manifest& m, BaseModel& base, ControlModel& control,
                         const RunConfig& cfg)
    : manifest_(m), cfg_(cfg), sampler_(1, cfg.seed) {
  const auto rows = training_rows(m, cfg.holdout);
  const int S = cfg.net.image_size;
  const auto& cc = cfg.control;
  std::vector<std::size_t> cached;

  if (cfg.task == Task::kTemporal) {
    if (cc.frame_channels != cfg.net.image_channels)
      throw ConfigError("temporal control frames are RGB images (control.frame_channels = " +
                        std::to_string(cfg.net.image_channels) + ")");
    std::map<std::string, std::vector<std::size_t>> groups;
    std::vector<std::string> order;
    for (auto r : rows) {
      const auto& rec = m.records[r];
      if (!rec.sequence_id) continue;
      if (!groups.count(*rec.sequence_id)) order.push_back(*rec.sequence_id);
      groups[*rec.sequence_id].push_back(r);
    }
    for (const auto& id : order) {
      auto& g = groups[id];
      if (g.size() < 2) continue;
      std::stable_sort(g.begin(), g.end(), [&](std::size_t a, std::size_t b) {
        return date_ordinal(m.records[a].metadata) < date_ordinal(m.records[b].metadata);
      });
      items_.push_back({g.front(), g});
      for (auto r : g) cached.push_back(r);
    }
    if (items_.empty()) throw DataError("manifest has no sequences with two or more frames");
    for (std::size_t i = 0; i < cached.size(); ++i) slot_[cached[i]] = i;
    target_latents_ = encode_latents(*base.vae, load_images(m, cached, S));
    frame_cache_ = target_latents_;
  } else {
    for (auto r : rows) {
      const auto& rec = m.records[r];
      if (cfg.task == Task::kSuperres && !rec.lowres_path)
        throw DataError("record " + rec.id + " has no lowres_path (super-resolution pair)");
      if (cfg.task == Task::kInpaint && !rec.mask_path)
        throw DataError("record " + rec.id + " has no mask_path (inpainting pair)");
      items_.push_back({r, {}});
      slot_[r] = cached.size();
      cached.push_back(r);
    }
    auto images = load_images(m, cached, S);
    target_latents_ = encode_latents(*base.vae, images);
    if (cfg.task == Task::kSuperres) {
      std::vector<torch::Tensor> frames;
      for (auto r : cached) {
        auto ms = read_multispectral(m.resolve(*m.records[r].lowres_path));
        auto sel = ms.bands.size() == 13 ? select_bands(ms.data, ms.bands) : ms.data;
        if (sel.size(0) != cc.frame_channels)
          throw ConfigError("low-res frames have " + std::to_string(sel.size(0)) +
                            " bands but control.frame_channels is " +
                            std::to_string(cc.frame_channels));
        frames.push_back(to_signed(resize_control(sel, S)));
      }
      frame_cache_ = torch::stack(frames);
    } else {
      if (cc.frame_channels != cfg.net.image_channels)
        throw ConfigError("inpainting control frames are RGB images");
      frame_cache_ = images;
      std::vector<torch::Tensor> masks;
      for (auto r : cached) {
        auto mk = read_image(m.resolve(*m.records[r].mask_path))[0];
        if (mk.size(0) != S || mk.size(1) != S)
          throw DataError("mask of record " + m.records[r].id + " does not match the image size");
        masks.push_back(mk);
      }
      masks_ = torch::stack(masks);
    }
  }
  (void)control;
  sampler_ = EpochSampler(items_.size(), cfg.seed);
}

ControlData::Assembled ControlData::assemble(const Item& item, Rng& rng, bool preview) {
  const auto& recs = manifest_.records;
  Assembled a;
  if (cfg_.task == Task::kTemporal) {
    const auto n = static_cast<std::int64_t>(item.frames.size());
    // Target strictly after (future) or strictly before (past) the conditioning set.
    bool future = true;
    std::int64_t k = n - 1, target = n - 1;
    if (!preview) {
      future = rng.bernoulli(0.5);
      k = rng.uniform_int(1, n - 1);
      target = future ? rng.uniform_int(k, n - 1) : rng.uniform_int(0, n - k - 1);
    }
    std::vector<Frame> frames;
    const std::int64_t lo = future ? 0 : n - k;
    for (std::int64_t j = lo; j < lo + k; ++j) {
      const auto row = item.frames[static_cast<std::size_t>(j)];
      frames.push_back({frame_cache_[static_cast<std::int64_t>(slot_.at(row))], recs[row].metadata});
    }
    a.target = item.frames[static_cast<std::size_t>(target)];
    PadOptions pad;
    pad.target_length = cfg_.temporal_frames;
    pad.min_frames = 1;
    pad.target_date = recs[a.target].metadata;
    auto padded = *pad_sequence(frames, pad);
    std::vector<torch::Tensor> f;
    std::vector<MetadataRecord> md;
    for (const auto& fr : padded) {
      f.push_back(fr.image);
      md.push_back(fr.metadata);
    }
    a.frames = torch::stack(f);
    a.md = normalized_batch(md);
    return a;
  }
  a.target = item.target;
  const auto slot = static_cast<std::int64_t>(slot_.at(item.target));
  MetadataRecord md = recs[item.target].metadata;
  if (cfg_.task == Task::kSuperres) {
    md.gsd = cfg_.superres_frame_gsd;
    a.frames = frame_cache_[slot].unsqueeze(0);
  } else {
    a.frames = inpaint_prepare(frame_cache_[slot], masks_[slot], cfg_.corruption, rng)
                   .frame.unsqueeze(0);
  }
  a.md = normalized_batch({md});
  return a;
}

std::pair<DiffusionBatch, ControlInput> ControlData::batch(std::int64_t iter, bool shuffle_frames) {
  const auto idx = sampler_.indices(iter, cfg_.batch_size);
  auto data = stream_rng(cfg_.seed, Stream::kData, static_cast<std::uint64_t>(iter));
  auto drop = stream_rng(cfg_.seed, Stream::kDropout, static_cast<std::uint64_t>(iter));
  auto noise = stream_rng(cfg_.seed, Stream::kNoise, static_cast<std::uint64_t>(iter));
  Rng shuffle(mix_seed(mix_seed(cfg_.seed, 0x5F0FULL), static_cast<std::uint64_t>(iter)));

  std::vector<torch::Tensor> frames, mds, lat;
  std::vector<const ManifestRecord*> recs;
  std::vector<MetadataRecord> target_md;
  for (auto i : idx) {
    auto a = assemble(items_[i], data, false);
    if (shuffle_frames) {
      std::vector<std::int64_t> perm(static_cast<std::size_t>(a.frames.size(0)));
      for (std::size_t j = 0; j < perm.size(); ++j) perm[j] = static_cast<std::int64_t>(j);
      for (std::size_t j = perm.size() - 1; j > 0; --j)
        std::swap(perm[j], perm[static_cast<std::size_t>(
                               shuffle.uniform_int(0, static_cast<std::int64_t>(j)))]);
      auto pt = torch::tensor(perm, torch::kLong);
      a.frames = a.frames.index_select(0, pt);
      a.md = a.md.index_select(0, pt);
    }
    frames.push_back(a.frames);
    mds.push_back(a.md);
    lat.push_back(target_latents_[static_cast<std::int64_t>(slot_.at(a.target))]);
    recs.push_back(&manifest_.records[a.target]);
    target_md.push_back(manifest_.records[a.target].metadata);
  }
  DiffusionBatch b;
  b.latents = torch::stack(lat);
  b.metadata = normalized_batch(target_md);
  draw_conditioning(recs, cfg_, drop, b);
  draw_noise(cfg_, noise, b);
  ControlInput in{torch::stack(frames), torch::stack(mds), cfg_.task == Task::kTemporal};
  return {b, in};
}

std::pair<SampleBatch, ControlInput> ControlData::preview(int n) {
  SampleBatch sb;
  std::vector<torch::Tensor> frames, mds;
  Rng rng(cfg_.seed);
  for (std::size_t i = 0; i < items_.size() && static_cast<int>(i) < n; ++i) {
    auto a = assemble(items_[i], rng, true);
    const auto& r = manifest_.records[a.target];
    sb.captions.push_back(
        build_caption(r.dataset_kind, r.labels, nullptr, caption_options(cfg_, false), &r.metadata));
    sb.metadata.push_back(MetadataInput{r.metadata});
    frames.push_back(a.frames);
    mds.push_back(a.md);
  }
  return {sb, ControlInput{torch::stack(frames), torch::stack(mds), cfg_.task == Task::kTemporal}};
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

using DumpMap = std::map<std::string, torch::Tensor>;

struct Loop {
  std::vector<std::string> names;
  std::vector<torch::Tensor> params;
  std::function<torch::Tensor(std::int64_t, json&, DumpMap&)> loss;
  std::function<void(CheckpointWriter&)> save;
  std::function<void(const Checkpoint&)> load;
  std::function<torch::Tensor()> preview;  // [N, 3, H, W] in [-1, 1]
  std::function<void()> finalize;
};

json resumable_view(const RunConfig& c) {
  auto j = to_json(c);
  for (const char* k : {"max_iters", "ckpt_every", "sample_every"}) j.erase(k);
  return j;
}

void truncate_log(const fs::path& log, int before) {
  std::vector<std::string> keep;
  {
    std::ifstream in(log);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto j = json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.value("iter", 0) < before) keep.push_back(line);
    }
  }
  std::ofstream out(log, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

[[noreturn]] void numerical_abort(const fs::path& out, std::int64_t iter, const std::string& what,
                                  const json& diag, const DumpMap& dump) {
  const auto base = out / strformat("nonfinite_iter%06lld", static_cast<long long>(iter));
  CheckpointWriter w;
  for (const auto& [k, t] : dump)
    if (t.defined() && t.is_floating_point()) w.add("batch", k, t);
  w.meta() = diag;
  w.meta()["iteration"] = iter;
  w.meta()["reason"] = what;
  w.write(base);
  throw NumericalError(what + " at iteration " + std::to_string(iter) + "; batch dumped to " +
                       base.string());
}

TrainResult run_loop(const RunConfig& cfg, const TrainOptions& opts, Loop& loop) {
  const fs::path out = opts.out;
  const fs::path ckdir = out / "ckpt";
  const fs::path log_path = out / "train_log.jsonl";
  fs::create_directories(out);

  AdamW opt(loop.names, loop.params, cfg.optim);
  TrainResult result;
  std::vector<double> history;
  int start = 0;

  if (opts.resume) {
    if (!fs::exists(ckdir / "manifest.json"))
      throw DependencyError("--resume given but " + ckdir.string() + " holds no checkpoint");
    auto ck = Checkpoint::load(ckdir);
    RunConfig saved = default_run_config(cfg.task);
    apply_json(saved, ck.meta().at("config"));
    if (resumable_view(saved) != resumable_view(cfg))
      throw ConfigError("resume config differs from the checkpoint's (only max_iters, "
                        "ckpt_every and sample_every may change)");
    loop.load(ck);
    torch::NoGradGuard ng;
    for (std::size_t i = 0; i < loop.names.size(); ++i) {
      opt.exp_avg()[i].copy_(ck.get("optim.exp_avg", loop.names[i]));
      opt.exp_avg_sq()[i].copy_(ck.get("optim.exp_avg_sq", loop.names[i]));
      opt.steps()[i].copy_(ck.get("optim.step", loop.names[i]).reshape(opt.steps()[i].sizes()));
    }
    start = ck.meta().at("iteration").get<int>();
    history = ck.meta().value("loss_history", std::vector<double>{});
    truncate_log(log_path, start);
  } else {
    if (fs::exists(ckdir))
      throw ConfigError("run directory " + out.string() +
                        " already holds a checkpoint; pass --resume or choose another --out");
    fs::remove(log_path);
  }
  {
    std::ofstream cf(out / "config.json");
    cf << to_json(cfg).dump(2) << "\n";
  }

  auto save_ckpt = [&](int iteration) {
    CheckpointWriter w;
    loop.save(w);
    for (std::size_t i = 0; i < loop.names.size(); ++i) {
      w.add("optim.exp_avg", loop.names[i], opt.exp_avg()[i]);
      w.add("optim.exp_avg_sq", loop.names[i], opt.exp_avg_sq()[i]);
      w.add("optim.step", loop.names[i], opt.steps()[i].reshape({1}));
    }
    w.meta()["task"] = to_string(cfg.task);
    w.meta()["config"] = to_json(cfg);
    w.meta()["config_hash"] = config_hash(cfg);
    w.meta()["seed"] = cfg.seed;
    w.meta()["iteration"] = iteration;
    w.meta()["loss_history"] = history;
    w.write(ckdir);
  };

  std::ofstream log(log_path, std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();
  result.start_iter = start;
  for (int iter = start; iter < cfg.max_iters; ++iter) {
    opt.zero_grad();
    json diag;
    DumpMap dump;
    auto loss = loop.loss(iter, diag, dump);
    const double lv = loss.item<double>();
    if (!std::isfinite(lv)) numerical_abort(out, iter, "non-finite loss", diag, dump);
    loss.backward();
    const double gn = clip_grad_norm(loop.params, cfg.grad_clip);
    if (!std::isfinite(gn)) numerical_abort(out, iter, "non-finite gradient", diag, dump);
    opt.step();

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << json{{"iter", iter}, {"loss", lv}, {"lr", cfg.optim.lr}, {"grad_norm", gn},
                {"wall", wall}}
               .dump()
        << "\n";
    log.flush();
    result.losses.push_back(lv);
    history.push_back(lv);
    if (history.size() > 100) history.erase(history.begin());
    if (opts.progress && ((iter + 1) % opts.progress_every == 0 || iter + 1 == cfg.max_iters))
      *opts.progress << strformat("[%s] iter %d/%d loss %.5f (%.1f s)\n",
                                  to_string(cfg.task).c_str(), iter + 1, cfg.max_iters, lv, wall)
                     << std::flush;

    const bool last = iter + 1 == cfg.max_iters;
    if (last && loop.finalize) loop.finalize();
    if ((iter + 1) % cfg.ckpt_every == 0 || last) save_ckpt(iter + 1);
    if ((cfg.sample_every > 0 && (iter + 1) % cfg.sample_every == 0) || last) {
      auto imgs = loop.preview();
      write_png_grid(out / "samples" / strformat("grid_%06d.png", iter + 1), to_unit(imgs),
                     static_cast<int>(std::min<std::int64_t>(imgs.size(0), 8)));
    }
  }
  result.end_iter = std::max(start, cfg.max_iters);
  result.checkpoint = ckdir;
  return result;
}

DumpMap batch_dump(const DiffusionBatch& b) {
  return {{"latents", b.latents}, {"metadata", b.metadata}, {"keep", b.keep},
          {"t", b.t.to(torch::kFloat32)}, {"eps", b.eps}};
}

json batch_diag(const DiffusionBatch& b) {
  std::vector<std::int64_t> t(b.t.data_ptr<std::int64_t>(), b.t.data_ptr<std::int64_t>() + b.t.numel());
  return {{"ids", b.ids}, {"captions", b.captions}, {"timesteps", t}};
}

void named_params(const torch::nn::Module& m, const std::string& prefix,
                  std::vector<std::string>& names, std::vector<torch::Tensor>& params) {
  for (const auto& p : m.named_parameters(true)) {
    names.push_back(prefix + p.key());
    params.push_back(p.value());
  }
}

TrainResult train_vae(const RunConfig& cfg, const TrainOptions& opts, const Manifest& m) {
  torch::manual_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(Stream::kInit)));
  Vae vae(cfg.net);
  const auto rows = training_rows(m, cfg.holdout);
  auto images = load_images(m, rows, cfg.net.image_size);
  EpochSampler sampler(rows.size(), cfg.seed);

  Loop loop;
  named_params(*vae, "vae.", loop.names, loop.params);
  loop.loss = [&](std::int64_t iter, json& diag, DumpMap& dump) {
    const auto idx = sampler.indices(iter, cfg.batch_size);
    auto noise = stream_rng(cfg.seed, Stream::kNoise, static_cast<std::uint64_t>(iter));
    auto x = images.index_select(0, rows_tensor(idx));
    auto post = vae->encode_posterior(x);
    auto z = post.mean + torch::exp(0.5 * post.logvar) * noise.normal(post.mean.sizes());
    auto rec = vae->decode_unscaled(z);
    auto kl = (-0.5 * (1 + post.logvar - post.mean.pow(2) - post.logvar.exp())).sum({1, 2, 3}).mean();
    std::vector<std::string> ids;
    for (auto i : idx) ids.push_back(m.records[rows[i]].id);
    diag["ids"] = ids;
    dump["images"] = x;
    return torch::mse_loss(rec, x) + cfg.vae_kl_weight * kl;
  };
  loop.finalize = [&] {
    auto lat = [&] {
      torch::NoGradGuard ng;
      vae->set_latent_scale(1.0);
      return encode_latents(*vae, images);
    }();
    const double sd = lat.to(torch::kFloat64).std().item<double>();
    vae->set_latent_scale(sd > 0 ? 1.0 / sd : 1.0);
  };
  loop.save = [&](CheckpointWriter& w) { w.add_module("vae", *vae); };
  loop.load = [&](const Checkpoint& ck) { ck.load_module("vae", *vae); };
  loop.preview = [&] {
    torch::NoGradGuard ng;
    auto x = images.slice(0, 0, std::min<std::int64_t>(8, images.size(0)));
    auto rec = vae->decode_unscaled(vae->encode_posterior(x).mean).clamp(-1, 1);
    return torch::cat({x, rec});
  };
  return run_loop(cfg, opts, loop);
}

TrainResult train_single(const RunConfig& cfg, const TrainOptions& opts, const Manifest& m) {
  if (opts.vae_ckpt.empty())
    throw DependencyError(
        "single_image training needs the stage-0 VAE checkpoint (--vae-ckpt); "
        "run `diffsat train --task vae` first");
  std::string vae_hash;
  RunConfig vae_cfg;
  Vae vae{nullptr};
  try {
    vae = load_vae(opts.vae_ckpt, &vae_hash, &vae_cfg);
  } catch (const DependencyError& e) {
    throw DependencyError(std::string("stage-0 VAE checkpoint unavailable: ") + e.what());
  }
  const auto& a = vae_cfg.net;
  const auto& b = cfg.net;
  if (a.image_size != b.image_size || a.image_channels != b.image_channels ||
      a.latent_channels != b.latent_channels || a.vae_factor != b.vae_factor ||
      a.vae_channels != b.vae_channels || a.norm_groups != b.norm_groups)
    throw ConfigError("VAE checkpoint net.* shape settings differ from this run's config");

  auto base = BaseModel::create(cfg, vae);
  SingleImageData data(m, base, cfg);

  Loop loop;
  loop.names = base.trainable_names();
  loop.params = base.trainable_parameters();
  loop.loss = [&](std::int64_t iter, json& diag, DumpMap& dump) {
    auto batch = data.batch(iter);
    diag = batch_diag(batch);
    dump = batch_dump(batch);
    return diffusion_batch_loss(base, batch);
  };
  loop.save = [&](CheckpointWriter& w) {
    w.add_module("vae", *base.vae);
    w.add_module("text", *base.text);
    w.add_module("unet", *base.unet);
    w.add_module("conditioner", *base.conditioner);
    w.meta()["vae_hash"] = vae_hash;
  };
  loop.load = [&](const Checkpoint& ck) {
    ck.load_module("unet", *base.unet);
    ck.load_module("conditioner", *base.conditioner);
  };
  loop.preview = [&] { return sample_batch(base, nullptr, data.preview(4), preview_options(cfg)); };
  return run_loop(cfg, opts, loop);
}

TrainResult train_control(const RunConfig& cfg, const TrainOptions& opts, const Manifest& m) {
  if (opts.base_ckpt.empty())
    throw DependencyError("control training needs a base single_image checkpoint (--base-ckpt)");
  auto base = BaseModel::load(opts.base_ckpt);
  set_requires_grad(*base.unet, false);
  set_requires_grad(*base.conditioner, false);
  auto control = ControlModel::create(cfg, base);
  ControlData data(m, base, control, cfg);

  Loop loop;
  named_params(*control.net, "control.", loop.names, loop.params);
  loop.loss = [&](std::int64_t iter, json& diag, DumpMap& dump) {
    auto [batch, in] = data.batch(iter);
    diag = batch_diag(batch);
    dump = batch_dump(batch);
    dump["frames"] = in.frames;
    return diffusion_batch_loss(base, batch, &control, &in);
  };
  loop.save = [&](CheckpointWriter& w) {
    w.add_module("control", *control.net);
    w.meta()["base_hash"] = base.hash;
  };
  loop.load = [&](const Checkpoint& ck) { ck.load_module("control", *control.net); };
  loop.preview = [&] {
    auto [sb, in] = data.preview(4);
    {
      torch::NoGradGuard ng;
      sb.control = control_latents(base, control, in);
    }
    return sample_batch(base, &control, sb, preview_options(cfg));
  };
  return run_loop(cfg, opts, loop);
}

}  // namespace

TrainResult train(const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (opts.out.empty()) throw ConfigError("an output run directory is required");
  const auto manifest = read_manifest(opts.manifest);
  switch (cfg.task) {
    case Task::kVae: return train_vae(cfg, opts, manifest);
    case Task::kSingleImage: return train_single(cfg, opts, manifest);
    default: return train_control(cfg, opts, manifest);
  }
}

std::vector<std::pair<int, double>> read_loss_log(const fs::path& run_dir) {
  std::ifstream in(run_dir / "train_log.jsonl");
  if (!in) throw DependencyError("no train_log.jsonl in " + run_dir.string());
  std::vector<std::pair<int, double>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = json::parse(line);
    out.emplace_back(j.at("iter").get<int>(), j.at("loss").get<double>());
  }
  return out;
}

}  // namespace diffsat
