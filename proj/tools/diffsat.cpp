// diffsat: synthetic data, training, sampling and evaluation from one binary.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "diffsat/captions.hpp"
#include "diffsat/checkpoint.hpp"
#include "diffsat/config.hpp"
#include "diffsat/errors.hpp"
#include "diffsat/image_io.hpp"
#include "diffsat/manifest.hpp"
#include "diffsat/metrics.hpp"
#include "diffsat/pipeline.hpp"
#include "diffsat/preprocess.hpp"
#include "diffsat/strings.hpp"
#include "diffsat/synthetic.hpp"
#include "diffsat/train.hpp"

using namespace diffsat;
using nlohmann::json;

namespace {

fs::path run_root() {
  const char* env = std::getenv("DIFFSAT_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string valid_keys() {
  std::string k;
  for (auto n : kMetadataFieldNames) k += (k.empty() ? "" : ", ") + std::string(n);
  return k;
}

// "lat=10,month=7" -> fields set on top of `base`.
MetadataInput parse_metadata(const std::string& spec, MetadataInput base) {
  for (const auto& kv : split(spec, ',')) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("metadata entry '" + kv + "' is not key=value");
    const auto key = kv.substr(0, eq);
    const auto idx = metadata_field_index(key);
    if (!idx) throw ConfigError("unknown metadata key '" + key + "' (valid keys: " + valid_keys() + ")");
    try {
      base.record.at(*idx) = std::stod(kv.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigError("metadata value for '" + key + "' is not a number");
    }
    base.present[static_cast<std::size_t>(*idx)] = true;
  }
  return base;
}

MetadataInput empty_metadata() {
  MetadataInput m;
  m.present.fill(false);
  return m;
}

json metadata_json(const MetadataInput& m) {
  json j = json::object();
  for (int i = 0; i < kNumMetadataFields; ++i)
    if (m.present[static_cast<std::size_t>(i)])
      j[std::string(kMetadataFieldNames[static_cast<std::size_t>(i)])] = m.record.at(i);
  return j;
}

torch::Tensor load_frame(const fs::path& p, int channels) {
  auto img = read_image(p);
  if (img.size(0) == 13 && channels == 10) img = select_bands(img);
  if (img.size(0) != channels)
    throw DataError("frame " + p.string() + " has " + std::to_string(img.size(0)) +
                    " channels, the control branch expects " + std::to_string(channels));
  return to_signed(img);
}

void write_samples(const fs::path& out, const torch::Tensor& imgs, const json& common,
                   const std::vector<json>& per_image) {
  fs::create_directories(out);
  auto unit = to_unit(imgs);
  write_png_grid(out / "grid.png", unit, static_cast<int>(std::min<std::int64_t>(imgs.size(0), 8)));
  for (std::int64_t i = 0; i < imgs.size(0); ++i) {
    const auto stem = strformat("sample_%03lld", static_cast<long long>(i));
    write_png(out / (stem + ".png"), unit[i]);
    json j = common;
    j["index"] = i;
    if (static_cast<std::size_t>(i) < per_image.size()) j.update(per_image[static_cast<std::size_t>(i)]);
    std::ofstream(out / (stem + ".json")) << j.dump(2) << "\n";
  }
}

struct GenArgs {
  std::string mode = "single";
  int n = 64;
  std::uint64_t seed = 0;
  std::string out;
  int image_size = 64;
  int lowres_factor = 4;
};

int cmd_gen_data(const GenArgs& a) {
  GenOptions o;
  o.mode = parse_gen_mode(a.mode);
  o.n = a.n;
  o.seed = a.seed;
  o.image_size = a.image_size;
  o.lowres_factor = a.lowres_factor;
  o.out_dir = a.out.empty() ? run_root() / strformat("data-%s-%llu", a.mode.c_str(),
                                                     static_cast<unsigned long long>(a.seed))
                            : fs::path(a.out);
  if (o.n < 1) throw ConfigError("--n must be >= 1");
  const auto recs = generate_synthetic_dataset(o);
  std::cout << "wrote " << recs.size() << " records to " << (o.out_dir / "manifest.jsonl").string()
            << "\n";
  return 0;
}

int cmd_validate(const std::string& manifest, bool no_files) {
  const auto rep = validate_manifest(manifest, !no_files);
  for (const auto& e : rep.errors) std::cerr << manifest << ":" << e.line << ": error: " << e.message << "\n";
  for (const auto& w : rep.warnings)
    std::cerr << manifest << ":" << w.line << ": warning: " << w.message << "\n";
  std::cout << rep.records << " records, " << rep.errors.size() << " errors, " << rep.warnings.size()
            << " warnings\n";
  return rep.ok() ? 0 : static_cast<int>(ExitCode::kDataValidation);
}

struct TrainArgs {
  std::string task;
  std::string config;
  std::string manifest;
  std::string out;
  std::string vae_ckpt;
  std::string base_ckpt;
  bool resume = false;
  std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& a) {
  const auto task = parse_task(a.task);
  const auto cfg = load_run_config(task, a.config, a.sets);
  TrainOptions o;
  o.manifest = a.manifest;
  o.out = a.out.empty() ? run_root() / (a.task + "-" + config_hash(cfg)) : fs::path(a.out);
  o.vae_ckpt = a.vae_ckpt;
  o.base_ckpt = a.base_ckpt;
  o.resume = a.resume;
  o.progress = &std::cerr;
  if (task == Task::kSingleImage && o.vae_ckpt.empty())
    throw DependencyError("train --task single_image requires the stage-0 VAE checkpoint "
                          "(--vae-ckpt <dir>); produce it with train --task vae");
  if (is_control_task(task) && o.base_ckpt.empty())
    throw DependencyError("train --task " + a.task +
                          " requires a base single_image checkpoint (--base-ckpt <dir>)");
  const auto r = train(cfg, o);
  std::cout << "trained iterations " << r.start_iter << ".." << r.end_iter << "; checkpoint "
            << r.checkpoint.string() << "\n";
  return 0;
}

struct SampleArgs {
  std::string mode = "single";
  std::string ckpt;
  std::string control_ckpt;
  std::string caption;
  std::string metadata;
  std::string frames;
  std::string frame_metadata;
  std::string mask;
  std::string metadata_seq;
  int steps = 100;
  double guidance = 1.0;
  double eta = 0.0;
  std::uint64_t seed = 0;
  int n = 1;
  std::string out;
};

int cmd_sample(const SampleArgs& a) {
  if (a.mode != "single" && a.mode != "control" && a.mode != "autoregressive")
    throw ConfigError("unknown --mode '" + a.mode + "' (expected single|control|autoregressive)");
  if (a.n < 1) throw ConfigError("--n must be >= 1");
  // Parse user input before loading anything heavy.
  const auto md = parse_metadata(a.metadata, empty_metadata());
  std::vector<MetadataInput> seq_md;
  for (const auto& part : split(a.metadata_seq, ';')) seq_md.push_back(parse_metadata(part, empty_metadata()));

  const fs::path out = a.out.empty() ? run_root() / strformat("samples-%s-%llu", a.mode.c_str(),
                                                              static_cast<unsigned long long>(a.seed))
                                     : fs::path(a.out);
  auto base = BaseModel::load(a.ckpt);
  SampleOptions so;
  so.steps = a.steps;
  so.guidance = a.guidance;
  so.eta = a.eta;
  so.seed = a.seed;
  so.n = a.n;
  if (so.steps < 1 || so.steps > base.schedule.num_steps)
    throw ConfigError("--steps must lie in [1, " + std::to_string(base.schedule.num_steps) + "]");
  json common{{"mode", a.mode},     {"caption", a.caption}, {"seed", a.seed},
              {"steps", a.steps},   {"guidance", a.guidance}, {"eta", a.eta},
              {"base_checkpoint", base.hash}};

  if (a.mode == "single") {
    common["metadata"] = metadata_json(md);
    write_samples(out, sample_single(base, a.caption, md, so), common, {});
  } else {
    if (a.control_ckpt.empty()) throw DependencyError("--mode " + a.mode + " requires --control-ckpt");
    auto control = ControlModel::load(a.control_ckpt, base);
    common["control_checkpoint"] = checkpoint_hash(resolve_checkpoint_dir(a.control_ckpt));
    common["task"] = to_string(control.config.task);
    if (a.mode == "autoregressive") {
      if (seq_md.empty()) throw ConfigError("--mode autoregressive requires --metadata-seq");
      std::vector<MetadataRecord> targets;
      for (const auto& m : seq_md) {
        if (!m.any() || std::find(m.present.begin(), m.present.end(), false) != m.present.end())
          throw ConfigError("every --metadata-seq entry needs all keys (" + valid_keys() + ")");
        targets.push_back(m.record);
      }
      auto res = autoregressive_generate(base, control, a.caption, targets, so);
      std::vector<json> per;
      for (const auto& s : res.trace)
        per.push_back({{"metadata", metadata_json(MetadataInput{s.target})},
                       {"seed", s.seed},
                       {"conditioning", s.conditioning}});
      write_samples(out, res.images, common, per);
      write_trace_jsonl(out / "trace.jsonl", res.trace);
    } else {
      const auto paths = split(a.frames, ',');
      if (paths.empty()) throw ConfigError("--mode control requires --frames");
      auto fmd = split(a.frame_metadata, ';');
      if (!fmd.empty() && fmd.size() != paths.size())
        throw ConfigError("--frame-metadata needs one entry per frame");
      const auto& cc = control.config.control;
      std::vector<Frame> frames;
      for (std::size_t i = 0; i < paths.size(); ++i) {
        MetadataInput fm{md.record};
        if (control.config.task == Task::kSuperres) fm.record.gsd = control.config.superres_frame_gsd;
        if (!fmd.empty()) fm = parse_metadata(fmd[i], fm);
        auto img = load_frame(paths[i], cc.frame_channels);
        if (control.config.task == Task::kInpaint && !a.mask.empty()) {
          auto mask = read_image(a.mask)[0];
          if (img.size(1) != mask.size(0) || img.size(2) != mask.size(1))
            mask = resize_control(mask.unsqueeze(0), static_cast<int>(img.size(1)))[0];
          Rng rng(mix_seed(a.seed, 0x1A9ULL));
          auto prep = inpaint_prepare(img, mask, control.config.corruption, rng);
          if (prep.empty_mask) std::cerr << "warning: empty inpainting mask, frame passed through\n";
          img = prep.frame;
        }
        frames.push_back({img, fm.record});
      }
      if (control.config.task == Task::kTemporal) {
        PadOptions pad;
        pad.target_length = control.config.temporal_frames;
        pad.min_frames = 1;
        pad.target_date = md.record;
        frames = *pad_sequence(frames, pad);
      } else if (frames.size() != 1) {
        throw ContractViolation(to_string(control.config.task) + " control takes exactly one frame");
      }
      ControlSequence seq;
      std::vector<torch::Tensor> imgs;
      for (const auto& f : frames) {
        imgs.push_back(f.image);
        seq.frame_metadata.push_back(f.metadata);
      }
      seq.frames = torch::stack(imgs);
      seq.caption = a.caption;
      seq.target_metadata = md.record;
      auto lat = encode_sequences(base, control, {seq});
      SampleBatch b;
      b.captions.assign(static_cast<std::size_t>(a.n), a.caption);
      b.metadata.assign(static_cast<std::size_t>(a.n), md);
      b.control = lat.expand({a.n, lat.size(1), lat.size(2), lat.size(3), lat.size(4)}).contiguous();
      common["metadata"] = metadata_json(md);
      common["frames"] = paths;
      write_samples(out, sample_batch(base, &control, b, so), common, {});
    }
  }
  std::cout << "wrote samples to " << out.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string pred_dir;
  std::string ref_manifest;
  std::string metrics = "psnr,ssim,mse";
  double bin_deg = 0.0;
  int min_count = 5;
  std::string out;
};

int cmd_evaluate(const EvalArgs& a) {
  const auto names = split(a.metrics, ',');
  auto& reg = MetricRegistry::instance();
  for (const auto& n : names) (void)reg.get(n);
  const auto m = read_manifest(a.ref_manifest);

  std::set<std::string> ref_ids;
  for (const auto& r : m.records) ref_ids.insert(r.id);
  std::vector<std::string> missing, extra;
  for (const auto& r : m.records)
    if (!fs::exists(fs::path(a.pred_dir) / (r.id + ".png"))) missing.push_back(r.id);
  if (fs::exists(a.pred_dir))
    for (const auto& e : fs::directory_iterator(a.pred_dir))
      if (e.path().extension() == ".png" && !ref_ids.count(e.path().stem().string()))
        extra.push_back(e.path().stem().string());
  if (!missing.empty() || !extra.empty()) {
    for (const auto& id : missing) std::cerr << "unpaired reference id (no prediction): " << id << "\n";
    std::sort(extra.begin(), extra.end());
    for (const auto& id : extra) std::cerr << "unpaired prediction id (no reference): " << id << "\n";
    throw DataError(std::to_string(missing.size() + extra.size()) + " unpaired ids");
  }

  MetricReport report;
  for (const auto& r : m.records) {
    auto pred = read_png(fs::path(a.pred_dir) / (r.id + ".png"));
    auto ref = read_image(m.resolve(r.image_path));
    if (pred.sizes() != ref.sizes())
      throw DataError("prediction " + r.id + " has a different shape than its reference");
    for (const auto& n : names)
      report.add(r.id, n, reg.get(n)(pred.unsqueeze(0), ref.unsqueeze(0)).at(0), r.metadata);
  }
  const fs::path out = a.out.empty() ? fs::path(a.pred_dir) / "eval" : fs::path(a.out);
  fs::create_directories(out);
  {
    std::ofstream f(out / "report.jsonl");
    report.write_jsonl(f);
  }
  {
    std::ofstream f(out / "summary.csv");
    report.write_summary_csv(f);
  }
  report.write_summary_csv(std::cout);
  if (a.bin_deg > 0) {
    const auto cells = binned_aggregate(report, a.bin_deg, a.min_count);
    std::ofstream f(out / "grid.csv");
    write_grid_csv(f, cells, report.metric_names());
    const auto art = ascii_grid(cells, a.bin_deg);
    std::ofstream(out / "grid.txt") << art;
    std::cout << art;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffsat: metadata-conditioned latent diffusion for synthetic satellite imagery"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 ok, 2 usage, 3 missing dependency, 4 data validation, 5 numerical.\n"
             "DIFFSAT_RUN_ROOT sets the default output root (default ./runs).");

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "render a synthetic dataset and its manifest");
  g->add_option("--mode", gen.mode, "single | temporal | superres | inpaint")->capture_default_str();
  g->add_option("--n", gen.n, "records (sequences for temporal)")->capture_default_str();
  g->add_option("--seed", gen.seed, "generator seed")->capture_default_str();
  g->add_option("--out", gen.out, "output directory");
  g->add_option("--image-size", gen.image_size, "image side in pixels")->capture_default_str();
  g->add_option("--lowres-factor", gen.lowres_factor, "superres downsampling factor")
      ->capture_default_str();

  std::string vmanifest;
  bool vnofiles = false;
  auto* v = app.add_subcommand("validate", "check a manifest and report problems by line");
  v->add_option("--manifest", vmanifest, "manifest.jsonl to check")->required();
  v->add_flag("--no-check-files", vnofiles, "skip file existence checks");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the VAE, the base model or a control branch");
  t->add_option("--task", tr.task, "vae | single_image | superres | temporal | inpaint")->required();
  t->add_option("--config", tr.config, "flat JSON config file");
  t->add_option("--manifest", tr.manifest, "training manifest")->required();
  t->add_option("--out", tr.out, "run directory");
  t->add_option("--vae-ckpt", tr.vae_ckpt, "stage-0 VAE run or checkpoint (single_image)");
  t->add_option("--base-ckpt", tr.base_ckpt, "base run or checkpoint (control tasks)");
  t->add_flag("--resume", tr.resume, "continue from the run directory's checkpoint");
  t->add_option("--set", tr.sets, "override a config key, key=value (repeatable)")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  auto* keys = app.add_subcommand("config-keys", "list every config key");

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "sample images from trained checkpoints");
  s->add_option("--mode", sa.mode, "single | control | autoregressive")->capture_default_str();
  s->add_option("--ckpt", sa.ckpt, "base run or checkpoint")->required();
  s->add_option("--control-ckpt", sa.control_ckpt, "control run or checkpoint");
  s->add_option("--caption", sa.caption, "caption text");
  s->add_option("--metadata", sa.metadata,
                "target metadata key=value,... (keys: lon, lat, gsd, cloud_cover, year, month, day); "
                "omitted keys contribute nothing");
  s->add_option("--frames", sa.frames, "control frames, comma separated (.png or .f32)");
  s->add_option("--frame-metadata", sa.frame_metadata,
                "per-frame metadata, ';' between frames; unset keys default to the target's");
  s->add_option("--mask", sa.mask, "inpainting mask PNG (nonzero = damaged)");
  s->add_option("--metadata-seq", sa.metadata_seq,
                "autoregressive targets, ';' between complete metadata entries");
  s->add_option("--steps", sa.steps, "DDIM steps")->capture_default_str();
  s->add_option("--guidance", sa.guidance, "classifier-free guidance scale")->capture_default_str();
  s->add_option("--eta", sa.eta, "DDIM eta")->capture_default_str();
  s->add_option("--seed", sa.seed, "sampling seed")->capture_default_str();
  s->add_option("--n", sa.n, "images to sample")->capture_default_str();
  s->add_option("--out", sa.out, "output directory");

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "score predictions against a reference manifest");
  e->add_option("--pred-dir", ev.pred_dir, "directory of <id>.png predictions")->required();
  e->add_option("--ref-manifest", ev.ref_manifest, "reference manifest")->required();
  e->add_option("--metrics", ev.metrics, "comma-separated metric names")->capture_default_str();
  e->add_option("--bin-deg", ev.bin_deg, "lat/lon grid cell size in degrees, 0 = no grid")
      ->capture_default_str();
  e->add_option("--min-count", ev.min_count, "cells below this count are low-confidence")
      ->capture_default_str();
  e->add_option("--out", ev.out, "report directory (default <pred-dir>/eval)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*v) return cmd_validate(vmanifest, vnofiles);
    if (*t) return cmd_train(tr);
    if (*keys) {
      for (const auto& k : config_keys()) std::cout << k.key << "\t" << k.doc << "\n";
      return 0;
    }
    if (*s) return cmd_sample(sa);
    if (*e) return cmd_evaluate(ev);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return static_cast<int>(err.code());
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
