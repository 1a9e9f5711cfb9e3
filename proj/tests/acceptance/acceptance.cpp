// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.
//
//   acceptance [--only 1,2,...] [--work DIR] [--reuse]
//
// --reuse keeps finished training runs found under --work (for iterating on
// the evaluation side); the ctest invocation always trains from scratch.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "diffsat/captions.hpp"
#include "diffsat/checkpoint.hpp"
#include "diffsat/diffusion.hpp"
#include "diffsat/errors.hpp"
#include "diffsat/image_io.hpp"
#include "diffsat/manifest.hpp"
#include "diffsat/metadata.hpp"
#include "diffsat/metrics.hpp"
#include "diffsat/pipeline.hpp"
#include "diffsat/preprocess.hpp"
#include "diffsat/strings.hpp"
#include "diffsat/synthetic.hpp"
#include "diffsat/train.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace diffsat;
using namespace diffsat::testing_util;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back((ok ? "" : "FAILED ") + what);
  }
  void note(const std::string& what) { notes.push_back(what); }
};

std::string fmt(double v, int prec = 3) { return strformat("%.*g", prec, v); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Loss log lines without the wall-clock field.
std::vector<std::string> log_entries(const fs::path& run) {
  std::vector<std::string> out;
  std::ifstream in(run / "train_log.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    auto j = json::parse(line);
    j.erase("wall");
    out.push_back(j.dump());
  }
  return out;
}

double window_mean(const std::vector<std::pair<int, double>>& log, int lo, int hi) {
  double s = 0;
  int n = 0;
  for (const auto& [it, l] : log)
    if (it >= lo && it < hi) s += l, ++n;
  return n ? s / n : std::nan("");
}

// ---------------------------------------------------------------------------
// Shared training runs

class Work {
 public:
  Work(fs::path root, bool reuse) : root_(std::move(root)), reuse_(reuse) {
    fs::create_directories(root_);
  }
  const fs::path& root() const { return root_; }

  fs::path dataset(const std::string& name, GenMode mode, int n, std::uint64_t seed, int lowres_factor = 4) {
    const auto dir = root_ / name;
    if (!(reuse_ && fs::exists(dir / "manifest.jsonl"))) {
      fs::remove_all(dir);
      GenOptions o;
      o.mode = mode;
      o.n = n;
      o.seed = seed;
      o.lowres_factor = lowres_factor;
      o.out_dir = dir;
      generate_synthetic_dataset(o);
    }
    return dir / "manifest.jsonl";
  }

  /// Trains `cfg` into root/name unless a finished run is kept by --reuse.
  fs::path run(const std::string& name, const RunConfig& cfg, TrainOptions o) {
    const auto dir = root_ / name;
    if (reuse_ && fs::exists(dir / "ckpt" / "manifest.json") &&
        static_cast<int>(read_loss_log(dir).size()) == cfg.max_iters)
      return dir;
    fs::remove_all(dir);
    o.out = dir;
    o.progress = &std::cerr;
    o.progress_every = 250;
    train(cfg, o);
    return dir;
  }

  // Overfit setup: 16 images, stage-0 VAE then the base model.
  static RunConfig overfit_vae_cfg() {
    auto c = default_run_config(Task::kVae);
    c.max_iters = 1500;
    c.ckpt_every = 1500;
    c.seed = 6;
    return c;
  }
  static RunConfig overfit_base_cfg() {
    auto c = default_run_config(Task::kSingleImage);
    c.max_iters = 2000;
    c.ckpt_every = 1000;
    c.seed = 6;
    c.sample_steps = 50;
    return c;
  }
  fs::path overfit_data() { return dataset("c6/data", GenMode::kSingle, 16, 6); }
  fs::path overfit_vae() {
    if (overfit_vae_.empty()) {
      TrainOptions o;
      o.manifest = overfit_data();
      overfit_vae_ = run("c6/vae", overfit_vae_cfg(), o);
    }
    return overfit_vae_;
  }
  fs::path overfit_base() {
    if (overfit_base_.empty()) {
      TrainOptions o;
      o.manifest = overfit_data();
      o.vae_ckpt = overfit_vae();
      overfit_base_ = run("c6/base", overfit_base_cfg(), o);
    }
    return overfit_base_;
  }

  // Month-conditioning setup: 512 images. The VAE runs longer than the overfit one
  // because the superres check decodes through it and its reconstruction caps PSNR.
  static RunConfig month_vae_cfg() {
    auto c = default_run_config(Task::kVae);
    c.max_iters = 4000;
    c.ckpt_every = 4000;
    c.seed = 7;
    return c;
  }
  static RunConfig month_base_cfg() {
    auto c = default_run_config(Task::kSingleImage);
    c.max_iters = 3000;
    c.ckpt_every = 1000;
    c.seed = 7;
    c.sample_steps = 50;
    return c;
  }
  fs::path month_data() { return dataset("c7/data", GenMode::kSingle, 512, 7); }
  fs::path month_base() {
    if (month_base_.empty()) {
      TrainOptions o;
      o.manifest = month_data();
      o.vae_ckpt = run("c7/vae", month_vae_cfg(), o);
      month_base_ = run("c7/base", month_base_cfg(), o);
    }
    return month_base_;
  }

  // Super-resolution control branch on top of the 512-image base.
  static constexpr int kSuperresHoldout = 32;
  static RunConfig superres_cfg() {
    auto c = default_run_config(Task::kSuperres);
    c.max_iters = 4000;
    c.ckpt_every = 500;
    c.seed = 8;
    c.holdout = kSuperresHoldout;
    c.sample_steps = 50;
    return c;
  }
  // Factor 8 (64 -> 8 px) keeps the resolution gap closer to the 10 m vs sub-metre gsd pair.
  static constexpr int kSuperresFactor = 8;
  fs::path superres_data() { return dataset("c8/data", GenMode::kSuperres, 256, 8, kSuperresFactor); }
  fs::path superres_control() {
    if (superres_.empty()) {
      TrainOptions o;
      o.manifest = superres_data();
      o.base_ckpt = month_base();
      superres_ = run("c8/control", superres_cfg(), o);
    }
    return superres_;
  }

 private:
  fs::path root_;
  bool reuse_;
  fs::path overfit_vae_, overfit_base_, month_base_, superres_;
};

// ---------------------------------------------------------------------------
// Criteria

Outcome math_kernels() {
  Outcome o;
  torch::manual_seed(101);
  double vp = 0;
  for (auto kind : {ScheduleKind::kScaledLinear, ScheduleKind::kCosine}) {
    auto s = build_schedule(1000, kind);
    for (int t = 0; t <= 1000; ++t) vp = std::max(vp, std::abs(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t) - 1));
  }
  o.check(vp <= 1e-6, "VP identity max err " + fmt(vp));

  auto s = build_schedule(1000, ScheduleKind::kScaledLinear);
  auto z = torch::randn({4, 4, 8, 8}), e = torch::randn({4, 4, 8, 8});
  double inv = 0, vel = 0;
  for (int t : {1, 10, 250, 500, 750, 999, 1000}) {
    auto zt = add_noise(z, t, e, s);
    inv = std::max(inv, max_abs_diff(ddim_step(zt, e, t, 0, PredictionMode::kEpsilon, s), z));
    auto v = compute_target(z, e, t, PredictionMode::kVelocity, s);
    auto est = estimates_from_prediction(zt, v, t, PredictionMode::kVelocity, s);
    vel = std::max({vel, max_abs_diff(est.sample, z), max_abs_diff(est.noise, e)});
  }
  o.check(inv <= 1e-5, "DDIM exact-eps inversion err " + fmt(inv));
  o.check(vel <= 1e-5, "velocity round trip err " + fmt(vel));

  auto u = torch::randn({2, 4, 8, 8}), c = torch::randn({2, 4, 8, 8});
  o.check(torch::equal(cfg_combine(u, c, 1.0), c), "cfg w=1 bitwise identity");

  double sin_err = 0;
  for (double k : {0.0, 1.0, 37.5, 123.4, 500.0, 999.0, 1000.0}) {
    for (int d : {32, 256}) {
      const auto ref = sinusoid_oracle(k, d);
      const auto got = sinusoidal_project(k, d);
      // The float32 path sees k rounded to float; its oracle takes the same input.
      const float kf = static_cast<float>(k);
      const auto ref_f = sinusoid_oracle(kf, d);
      auto emb = sinusoidal_embedding(torch::tensor({kf}), d);
      for (int i = 0; i < d; ++i) {
        sin_err = std::max(sin_err, std::abs(got[i] - ref[i]));
        sin_err = std::max(sin_err, std::abs(emb[0][i].item<double>() - ref_f[i]));
      }
    }
  }
  o.check(sin_err <= 1e-6, "sinusoidal projection vs long-double oracle err " + fmt(sin_err));

  const auto ranges = default_field_ranges();
  std::array<double, kNumMetadataFields> lo{}, hi{};
  for (int j = 0; j < kNumMetadataFields; ++j) lo[j] = ranges[j].low, hi[j] = ranges[j].high;
  const auto nlo = normalize_metadata(MetadataRecord::from_values(lo)).values;
  const auto nhi = normalize_metadata(MetadataRecord::from_values(hi)).values;
  double end_err = 0;
  for (int j = 0; j < kNumMetadataFields; ++j)
    end_err = std::max({end_err, std::abs(nlo[j]), std::abs(nhi[j] - 1000.0)});
  o.check(end_err <= 1e-9, "normalization endpoints (7 fields) err " + fmt(end_err));
  return o;
}

// Relative error of autodiff against central differences on chosen entries.
double fd_check(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& params,
                const std::vector<std::pair<std::size_t, std::int64_t>>& entries) {
  for (auto p : params) p.mutable_grad() = torch::Tensor();
  f().backward();
  double worst = 0;
  for (const auto& [pi, idx] : entries) {
    auto flat = params[pi].data().view(-1);
    const double an = params[pi].grad().view(-1)[idx].item<double>();
    const double h = 1e-6, orig = flat[idx].item<double>();
    double lp, lm;
    {
      torch::NoGradGuard ng;
      flat[idx] = orig + h;
      lp = f().item<double>();
      flat[idx] = orig - h;
      lm = f().item<double>();
      flat[idx] = orig;
    }
    const double fd = (lp - lm) / (2 * h);
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(an), std::abs(fd), 1e-4}));
  }
  return worst;
}

Outcome gradient_checks() {
  Outcome o;
  {
    torch::manual_seed(201);
    EmbeddingMlp mlp(256, 512, false);
    mlp->to(torch::kFloat64);
    perturb(*mlp, 0.05, 202);
    auto k = torch::tensor({12.0, 480.0, 999.0}, torch::kFloat64);
    auto w = torch::randn({3, 512}, torch::kFloat64);
    auto params = mlp->parameters();
    std::vector<std::pair<std::size_t, std::int64_t>> entries;
    for (std::size_t p = 0; p < params.size(); ++p)
      for (int i = 0; i < 4; ++i) entries.emplace_back(p, (params[p].numel() / 4) * i + i);
    const double err = fd_check([&] { return (mlp->forward(k) * w).sum(); }, params, entries);
    o.check(err < 1e-3, "metadata MLP rel err " + fmt(err) + " over " + std::to_string(entries.size()) + " entries");
  }
  {
    torch::manual_seed(203);
    NetworkConfig net;
    UNet unet(net);
    TextEncoder text(net);
    unet->to(torch::kFloat64);
    perturb(*unet, 0.02, 204);
    TextEmbedding emb;
    {
      torch::NoGradGuard ng;
      emb = text->encode({"a synthetic satellite image", "of a port"});
    }
    emb.tokens = emb.tokens.to(torch::kFloat64);
    auto z = torch::randn({2, net.latent_channels, net.latent_size(), net.latent_size()}, torch::kFloat64);
    auto c = torch::randn({2, net.cond_dim}, torch::kFloat64);
    auto target = torch::randn_like(z);
    std::vector<torch::Tensor> params;
    std::vector<std::pair<std::size_t, std::int64_t>> entries;
    // Output head, input conv, first attention projection, first embedding projection.
    const std::vector<std::string> wanted = {"conv_out.weight", "down.conv_in.weight", "attn", "emb_proj"};
    for (const auto& key : wanted) {
      for (const auto& item : unet->named_parameters()) {
        if (item.key() != key && (key.find('.') != std::string::npos || item.key().find(key) == std::string::npos))
          continue;
        params.push_back(item.value());
        for (int i = 0; i < 3; ++i)
          entries.emplace_back(params.size() - 1, (item.value().numel() / 3) * i + 1);
        break;
      }
    }
    const double err = fd_check([&] { return diffusion_loss(unet->forward(z, c, emb), target); }, params, entries);
    o.check(err < 1e-3, "denoiser slice rel err " + fmt(err) + " over " + std::to_string(entries.size()) + " entries");
  }
  return o;
}

MetadataRecord fixed_md(double month = 6) {
  return MetadataRecord{10.0, 20.0, 0.8, 0.0, 2018, month, 15};
}

Outcome init_noop(Work& w) {
  Outcome o;
  auto base = BaseModel::load(resolve_checkpoint_dir(w.overfit_base()));
  const int S = base.config.net.image_size;
  SampleOptions so;
  so.steps = 100;
  so.seed = 301;
  so.n = 2;
  for (auto task : {Task::kTemporal, Task::kSuperres}) {
    auto cfg = default_run_config(task);
    cfg.net = base.config.net;
    cfg.seed = 302;
    auto control = ControlModel::create(cfg, base);
    const int T = task == Task::kTemporal ? 3 : 1;
    Rng rng(303);
    ControlSequence seq;
    seq.frames = rng.normal({T, cfg.control.frame_channels, S, S}).tanh();
    for (int i = 0; i < T; ++i) seq.frame_metadata.push_back(fixed_md(1 + 3 * i));
    seq.caption = "a synthetic satellite image of a field in Dunmere";
    seq.target_metadata = fixed_md(9);
    auto a = sample_conditional(base, control, seq, so);
    auto b = sample_single(base, seq.caption, MetadataInput{seq.target_metadata}, so);
    const double d = max_abs_diff(a, b);
    o.check(d < 1e-5, to_string(task) + " fresh branch vs base-only, 100 steps, max abs diff " + fmt(d));
  }
  return o;
}

Outcome order_invariance(Work& w) {
  Outcome o;
  auto base = BaseModel::load(resolve_checkpoint_dir(w.overfit_base()));
  const auto& net = base.config.net;
  auto cfg = default_run_config(Task::kTemporal);
  cfg.net = net;
  cfg.seed = 401;
  auto control = ControlModel::create(cfg, base);
  // Move every zero-initialized layer off zero so each frame matters.
  perturb(*control.net, 0.02, 402);

  Rng rng(403);
  const int T = 4;
  ControlSequence seq;
  seq.frames = rng.normal({T, 3, net.image_size, net.image_size}).tanh();
  for (int i = 0; i < T; ++i) seq.frame_metadata.push_back(MetadataRecord{5.0 * i, -3.0 * i, 0.5 + i, 0.1 * i, 2014.0 + i, 2.0 + 3 * i, 1.0 + 7 * i});
  seq.caption = "a synthetic satellite image of a river";
  seq.target_metadata = fixed_md(11);

  double worst_res = 0, sensitivity = 0;
  for (const std::vector<std::int64_t>& order :
       std::vector<std::vector<std::int64_t>>{{3, 2, 1, 0}, {1, 3, 0, 2}, {2, 0, 3, 1}}) {
    ControlSequence perm = seq;
    perm.frames = seq.frames.index_select(0, torch::tensor(order));
    for (std::size_t i = 0; i < order.size(); ++i) perm.frame_metadata[i] = seq.frame_metadata[static_cast<std::size_t>(order[i])];
    torch::NoGradGuard ng;
    auto la = encode_sequences(base, control, {seq});
    auto lb = encode_sequences(base, control, {perm});
    auto text = base.encode_text({seq.caption});
    auto md = normalized_batch({seq.target_metadata});
    for (int t : {1000, 500, 20}) {
      auto z = rng.normal({1, net.latent_channels, net.latent_size(), net.latent_size()});
      auto cond = base.conditioner(md, torch::full({1}, float(t)), torch::ones({1}));
      auto ra = control.net(z, cond, text, la);
      auto rb = control.net(z, cond, text, lb);
      for (std::size_t i = 0; i < ra.size(); ++i) {
        worst_res = std::max(worst_res, max_abs_diff(ra[i], rb[i]));
        sensitivity = std::max(sensitivity, ra[i].abs().max().item<double>());
      }
    }
  }
  o.check(worst_res <= 1e-4, "residuals under 3 joint permutations, max diff " + fmt(worst_res));
  o.check(sensitivity > 1e-3, "residuals are non-trivial (max |r| " + fmt(sensitivity) + ")");

  SampleOptions so;
  so.steps = 100;
  so.seed = 404;
  ControlSequence perm = seq;
  const std::vector<std::int64_t> order = {2, 0, 3, 1};
  perm.frames = seq.frames.index_select(0, torch::tensor(order));
  for (std::size_t i = 0; i < order.size(); ++i) perm.frame_metadata[i] = seq.frame_metadata[static_cast<std::size_t>(order[i])];
  auto a = sample_conditional(base, control, seq, so);
  auto b = sample_conditional(base, control, perm, so);
  const double ds = max_abs_diff(a, b);
  o.check(ds <= 1e-4, "final samples, 100 steps, max diff " + fmt(ds));
  // Sanity: the branch does steer the sample.
  auto plain = sample_single(base, seq.caption, MetadataInput{seq.target_metadata}, so);
  o.note("control effect on samples " + fmt(max_abs_diff(a, plain)));
  return o;
}

std::string fill_segment(const std::string& text, const CaptionLabels& l) {
  const auto open = text.find('<');
  if (open == std::string::npos) return text;
  const auto close = text.find('>', open);
  const auto* v = l.find(text.substr(open + 1, close - open - 1));
  return text.substr(0, open) + (v && *v ? **v : "") + text.substr(close + 1);
}

Outcome dropout_statistics() {
  Outcome o;
  const int n = 10000;
  {
    Rng rng(501);
    auto m = torch::rand({7}) + 0.5;
    int zeroed = 0;
    bool atomic = true;
    for (int i = 0; i < n; ++i) {
      auto out = metadata_dropout(m, 0.1, rng);
      const auto nz = out.ne(0).sum().item<std::int64_t>();
      if (nz == 0)
        ++zeroed;
      else if (!torch::equal(out, m))
        atomic = false;
    }
    const double rate = double(zeroed) / n;
    o.check(rate >= 0.08 && rate <= 0.12 && atomic, "metadata zero-rate " + fmt(rate, 4));
  }

  struct Row {
    DatasetKind kind;
    CaptionLabels labels;
    std::string golden;
  };
  std::vector<Row> rows(5);
  rows[0] = {DatasetKind::kFmow, {}, "a fmow satellite image of a stadium in France"};
  rows[0].labels.object = "stadium";
  rows[0].labels.country = "France";
  rows[1] = {DatasetKind::kXbd, {}, "a fmow satellite image after being affected by a flooding natural disaster"};
  rows[1].labels.disaster_type = "flooding";
  rows[1].labels.phase = "after";
  rows[2] = {DatasetKind::kSpacenet, {}, "a spacenet satellite image of roads in Vegas"};
  rows[2].labels.object = "roads";
  rows[2].labels.city = "Vegas";
  rows[3] = {DatasetKind::kSatlas, {}, "a satlas satellite image of wind turbines"};
  rows[3].labels.object = "wind turbines";
  rows[4] = {DatasetKind::kTexas, {}, "a satlas satellite image of houses built in 1995 covering 0.25 acres"};
  rows[4].labels.year_built = "1995";
  rows[4].labels.num_acres = "0.25";

  int goldens = 0;
  double lo = 1, hi = 0;
  int segments = 0;
  for (const auto& r : rows) {
    if (build_caption(r.kind, r.labels, nullptr) == r.golden) ++goldens;
    std::vector<std::string> probes;
    for (const auto& seg : caption_template(r.kind))
      if (seg.droppable) probes.push_back(fill_segment(seg.text, r.labels));
    Rng rng(502 + static_cast<std::uint64_t>(r.kind));
    CaptionOptions co;
    co.dropout_rate = 0.1;
    std::vector<int> dropped(probes.size(), 0);
    for (int i = 0; i < n; ++i) {
      const auto cap = build_caption(r.kind, r.labels, &rng, co);
      for (std::size_t s = 0; s < probes.size(); ++s)
        if (cap.find(probes[s]) == std::string::npos) ++dropped[s];
    }
    for (int d : dropped) {
      lo = std::min(lo, double(d) / n);
      hi = std::max(hi, double(d) / n);
      ++segments;
    }
  }
  o.check(goldens == 5, std::to_string(goldens) + "/5 template goldens");
  o.check(segments > 0 && lo >= 0.08 && hi <= 0.12,
          "caption segment dropout rates in [" + fmt(lo, 4) + ", " + fmt(hi, 4) + "] over " +
              std::to_string(segments) + " segments");
  return o;
}

Outcome overfit(Work& w) {
  Outcome o;
  const auto base_dir = w.overfit_base();
  const auto log = read_loss_log(base_dir);
  const double first = window_mean(log, 0, 100), last = window_mean(log, 1900, 2000);
  o.check(last <= 0.2 * first, "loss window ratio " + fmt(last / first) + " (initial " + fmt(first) +
                                   ", final " + fmt(last) + ")");

  auto base = BaseModel::load(resolve_checkpoint_dir(base_dir));
  const auto m = read_manifest(w.overfit_data());
  auto cfg = Work::overfit_base_cfg();
  SingleImageData data(m, base, cfg);
  const auto batch = data.preview(static_cast<int>(data.size()));
  SampleOptions so;
  so.steps = 100;
  so.seed = 601;
  auto samples = to_unit(sample_batch(base, nullptr, batch, so));
  const auto refs = to_unit(load_images(m, training_rows(m, 0), base.config.net.image_size));

  const auto out = w.root() / "c6" / "samples";
  fs::remove_all(out);
  fs::create_directories(out);
  std::vector<double> best;
  for (std::int64_t i = 0; i < samples.size(0); ++i) {
    write_png(out / strformat("sample_%03lld.png", static_cast<long long>(i)), samples[i]);
    double b = 0;
    for (std::int64_t j = 0; j < refs.size(0); ++j) b = std::max(b, psnr(samples[i], refs[j]));
    best.push_back(b);
  }
  const auto agg = aggregate(best);
  const double worst = *std::min_element(best.begin(), best.end());
  o.check(agg.mean >= 20.0, "best-match PSNR mean " + fmt(agg.mean) + " dB (min " + fmt(worst) +
                                " dB) over " + std::to_string(best.size()) + " samples");
  return o;
}

Outcome metadata_efficacy(Work& w) {
  Outcome o;
  auto base = BaseModel::load(resolve_checkpoint_dir(w.month_base()));
  CaptionLabels labels;
  labels.object = "field";
  const auto md_fixed = fixed_md();
  labels.country = gazetteer_country(md_fixed.lon, md_fixed.lat);
  const auto caption = build_caption(DatasetKind::kSynthetic, labels, nullptr);
  const auto out = w.root() / "c7" / "samples";
  fs::remove_all(out);
  fs::create_directories(out);
  // Checked with classifier-free guidance at 3; the unguided rate is reported.
  for (double guidance : {1.0, 3.0}) {
    for (int month : {1, 7}) {
      SampleBatch b;
      b.captions.assign(50, caption);
      b.metadata.assign(50, MetadataInput{fixed_md(month)});
      SampleOptions so;
      so.steps = 100;
      so.seed = 700 + static_cast<std::uint64_t>(month);
      so.guidance = guidance;
      auto imgs = to_unit(sample_batch(base, nullptr, b, so));
      int hits = 0;
      std::map<int, int> hist;
      for (std::int64_t i = 0; i < imgs.size(0); ++i) {
        const auto p = probe_metadata(imgs[i]);
        ++hist[p.month];
        if (p.month == month) ++hits;
        write_png(out / strformat("w%g_m%02d_%03lld.png", guidance, month, static_cast<long long>(i)), imgs[i]);
      }
      std::string h;
      for (const auto& [mo, c] : hist) h += (h.empty() ? "" : " ") + std::to_string(mo) + ":" + std::to_string(c);
      const auto what = "w=" + fmt(guidance) + " month=" + std::to_string(month) + " recovered " +
                        std::to_string(hits) + "/50 (probe months " + h + ")";
      if (guidance == 1.0)
        o.note(what);
      else
        o.check(hits >= 40, what);
    }
  }
  return o;
}

Outcome superres_gain(Work& w) {
  Outcome o;
  const auto control_dir = w.superres_control();
  auto base = BaseModel::load(resolve_checkpoint_dir(w.month_base()));
  auto control = ControlModel::load(resolve_checkpoint_dir(control_dir), base);
  const auto& cfg = control.config;
  const auto m = read_manifest(w.superres_data());
  const int S = base.config.net.image_size;
  const auto n = static_cast<std::int64_t>(m.records.size());

  std::vector<ControlSequence> seqs;
  std::vector<torch::Tensor> refs, bilinear;
  SampleBatch b;
  for (std::int64_t i = n - Work::kSuperresHoldout; i < n; ++i) {
    const auto& r = m.records[static_cast<std::size_t>(i)];
    const auto ms = read_multispectral(m.resolve(*r.lowres_path));
    refs.push_back(read_image(m.resolve(r.image_path)));
    std::vector<std::int64_t> rgb;
    for (const char* band : {"B4", "B3", "B2"})
      rgb.push_back(std::find(ms.bands.begin(), ms.bands.end(), band) - ms.bands.begin());
    bilinear.push_back(resize_control(ms.data.index_select(0, torch::tensor(rgb)), S).clamp(0, 1));
    ControlSequence s;
    s.frames = to_signed(resize_control(select_bands(ms.data, ms.bands), S)).unsqueeze(0);
    auto fmd = r.metadata;
    fmd.gsd = cfg.superres_frame_gsd;
    s.frame_metadata = {fmd};
    s.caption = build_caption(r.dataset_kind, r.labels, nullptr);
    s.target_metadata = r.metadata;
    b.captions.push_back(s.caption);
    b.metadata.push_back(MetadataInput{r.metadata});
    seqs.push_back(std::move(s));
  }
  b.control = encode_sequences(base, control, seqs);
  SampleOptions so;
  so.steps = 100;
  so.seed = 801;
  auto samples = to_unit(sample_batch(base, &control, b, so));

  const auto out = w.root() / "c8" / "samples";
  fs::remove_all(out);
  fs::create_directories(out);
  std::vector<double> ps, pb;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    ps.push_back(psnr(samples[static_cast<std::int64_t>(i)], refs[i]));
    pb.push_back(psnr(bilinear[i], refs[i]));
    write_png(out / strformat("sample_%03zu.png", i), samples[static_cast<std::int64_t>(i)]);
  }
  const double ms = aggregate(ps).mean, mb = aggregate(pb).mean;
  o.check(ms - mb >= 1.0, "held-out PSNR " + fmt(ms) + " dB vs bilinear " + fmt(mb) + " dB (gain " +
                              fmt(ms - mb) + " dB, " + std::to_string(ps.size()) + " pairs)");
  return o;
}

// Reruns from scratch must reproduce what the long runs logged and wrote. The
// training reruns are prefixes: a run is a pure function of (config, seed,
// iteration), so the first P log entries of a shorter run must match.
Outcome reproducibility(Work& w) {
  Outcome o;
  const auto rerun = w.root() / "c9";
  fs::remove_all(rerun);

  // Dataset bytes.
  {
    GenOptions g;
    g.mode = GenMode::kSingle;
    g.n = 16;
    g.seed = 6;
    g.out_dir = rerun / "data";
    generate_synthetic_dataset(g);
    const auto orig = w.overfit_data().parent_path();
    int same = 0, total = 0;
    for (const auto& e : fs::recursive_directory_iterator(orig)) {
      if (!e.is_regular_file()) continue;
      ++total;
      if (slurp(e.path()) == slurp(g.out_dir / fs::relative(e.path(), orig))) ++same;
    }
    o.check(same == total && total == 17, "gen-data rerun " + std::to_string(same) + "/" + std::to_string(total) + " files identical");
  }

  auto prefix = [&](const std::string& name, RunConfig cfg, TrainOptions opts, const fs::path& full, int P) {
    cfg.max_iters = P;
    opts.out = rerun / name;
    train(cfg, opts);
    const auto a = log_entries(full), b = log_entries(opts.out);
    const bool ok = static_cast<int>(b.size()) == P && static_cast<int>(a.size()) >= P &&
                    std::equal(b.begin(), b.end(), a.begin());
    o.check(ok, name + " log, first " + std::to_string(P) + " iterations bit-identical");
  };
  {
    TrainOptions t;
    t.manifest = w.overfit_data();
    prefix("vae", Work::overfit_vae_cfg(), t, w.overfit_vae(), 100);
    t.vae_ckpt = w.overfit_vae();
    prefix("base", Work::overfit_base_cfg(), t, w.overfit_base(), 100);
  }
  {
    TrainOptions t;
    t.manifest = w.superres_data();
    t.base_ckpt = w.month_base();
    prefix("superres", Work::superres_cfg(), t, w.superres_control(), 50);
  }

  // Sample files: regenerate from the stored checkpoints in a fresh model.
  auto compare_dirs = [&](const fs::path& a, const fs::path& b, const std::string& what) {
    int same = 0, total = 0;
    for (const auto& e : fs::directory_iterator(a)) {
      ++total;
      if (fs::exists(b / e.path().filename()) && slurp(e.path()) == slurp(b / e.path().filename())) ++same;
    }
    o.check(total > 0 && same == total, what + " " + std::to_string(same) + "/" + std::to_string(total) + " PNGs byte-identical");
  };
  {
    auto copy = [&](const fs::path& from, const std::string& to) {
      fs::create_directories((rerun / "resample" / to).parent_path());
      fs::copy(from, rerun / "resample" / to, fs::copy_options::recursive);
    };
    // Same inputs, fresh process state: reuse only the trained checkpoints.
    copy(w.overfit_data().parent_path(), "c6/data");
    copy(w.overfit_vae(), "c6/vae");
    copy(w.overfit_base(), "c6/base");
    Work keep(rerun / "resample", true);
    (void)overfit(keep);
    compare_dirs(w.root() / "c6" / "samples", rerun / "resample" / "c6" / "samples", "overfit samples");
  }
  return o;
}

Outcome metric_oracles() {
  Outcome o;
  torch::manual_seed(1001);
  double pe = 0, se = 0;
  for (int i = 0; i < 10; ++i) {
    auto a = torch::rand({3, 48, 48});
    auto b = (a + torch::randn({3, 48, 48}) * (0.02 + 0.05 * i)).clamp(0, 1);
    pe = std::max(pe, std::abs(psnr(a, b) - psnr_oracle(a, b)));
    se = std::max(se, std::abs(ssim(a, b) - ssim_oracle(a, b)));
  }
  o.check(pe <= 1e-6, "PSNR vs oracle max err " + fmt(pe) + " on 10 pairs");
  o.check(se <= 1e-6, "SSIM vs oracle max err " + fmt(se) + " on 10 pairs");

  Rng rng(1002);
  MetricReport r;
  const int n = 5000;
  for (int i = 0; i < n; ++i) {
    MetadataRecord md{};
    md.lon = -180 + 360 * rng.uniform();
    md.lat = -90 + 180 * rng.uniform();
    if (i % 50 == 0) md.lat = (i % 100 == 0) ? 90.0 : -90.0;
    if (i % 70 == 0) md.lon = 180.0;
    r.add("x" + std::to_string(i), "psnr", 20 + rng.uniform(), md);
  }
  bool exact = true;
  for (double deg : {1.0, 7.5, 10.0, 45.0}) {
    int total = 0;
    for (const auto& c : binned_aggregate(r, deg)) total += c.count;
    exact = exact && total == n;
  }
  o.check(exact, "binned_aggregate conserves " + std::to_string(n) + " samples at 4 cell sizes");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string only;
  std::string work = std::string(DIFFSAT_TEST_TMP) + "/acceptance";
  bool reuse = false;
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_option("--work", work, "scratch directory");
  app.add_flag("--reuse", reuse, "keep finished training runs found in --work");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  {
    std::stringstream ss(only);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) selected.insert(std::stoi(tok));
  }
  Work w(work, reuse);

  struct Criterion {
    int id;
    std::string name;
    std::function<Outcome()> run;
  };
  // Quick in-process checks first, then the training runs they do not need.
  const std::vector<Criterion> order = {
      {1, "math kernels", [] { return math_kernels(); }},
      {2, "gradient checks", [] { return gradient_checks(); }},
      {5, "dropout and caption statistics", [] { return dropout_statistics(); }},
      {10, "metric oracles", [] { return metric_oracles(); }},
      {6, "overfit run", [&] { return overfit(w); }},
      {3, "init no-op", [&] { return init_noop(w); }},
      {4, "order invariance", [&] { return order_invariance(w); }},
      {7, "metadata efficacy", [&] { return metadata_efficacy(w); }},
      {8, "superres gain", [&] { return superres_gain(w); }},
      {9, "reproducibility", [&] { return reproducibility(w); }},
  };

  std::map<int, std::string> lines;
  bool all = true;
  for (const auto& c : order) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome res;
    try {
      res = c.run();
    } catch (const std::exception& e) {
      res.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string detail;
    for (const auto& n : res.notes) detail += (detail.empty() ? "" : "; ") + n;
    const auto line = strformat("%s criterion %d: %s [%.0f s] %s", res.pass ? "PASS" : "FAIL", c.id,
                                c.name.c_str(), secs, detail.c_str());
    std::cout << line << std::endl;
    lines[c.id] = line;
    all = all && res.pass;
  }
  std::cout << "\nsummary\n";
  for (const auto& [id, line] : lines) std::cout << line << "\n";
  return all ? 0 : 1;
}
