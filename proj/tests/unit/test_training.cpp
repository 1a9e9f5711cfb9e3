#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "diffsat/checkpoint.hpp"
#include "diffsat/errors.hpp"
#include "diffsat/synthetic.hpp"
#include "diffsat/train.hpp"
#include "test_util.hpp"

using namespace diffsat;
using namespace diffsat::testing_util;

namespace {

// Tiny datasets plus a stage-0 VAE and a base run, built once per process.
struct Env {
  fs::path root;
  fs::path single, temporal, superres, inpaint;
  fs::path vae_run, base_run;

  Env() {
    root = scratch("training_env");
    auto gen = [&](GenMode mode, int n, const std::string& name) {
      GenOptions o;
      o.mode = mode;
      o.n = n;
      o.seed = 21;
      o.image_size = 32;
      o.out_dir = root / name;
      generate_synthetic_dataset(o);
      return o.out_dir / "manifest.jsonl";
    };
    single = gen(GenMode::kSingle, 12, "single");
    temporal = gen(GenMode::kTemporal, 4, "temporal");
    superres = gen(GenMode::kSuperres, 6, "superres");
    inpaint = gen(GenMode::kInpaint, 6, "inpaint");

    auto vcfg = tiny_run(Task::kVae);
    vcfg.max_iters = 3;
    vae_run = root / "vae";
    train(vcfg, {single, vae_run});

    base_run = root / "base";
    TrainOptions o{single, base_run};
    o.vae_ckpt = vae_run;
    train(tiny_run(Task::kSingleImage), o);
  }
};

Env& env() {
  static Env e;
  return e;
}

RunConfig control_cfg(Task task) {
  auto c = tiny_run(task);
  c.batch_size = 2;
  return c;
}

fs::path manifest_for(Task t) {
  switch (t) {
    case Task::kSuperres: return env().superres;
    case Task::kTemporal: return env().temporal;
    case Task::kInpaint: return env().inpaint;
    default: return env().single;
  }
}

std::vector<double> log_losses(const fs::path& run) {
  std::vector<double> out;
  for (const auto& [it, l] : read_loss_log(run)) out.push_back(l);
  return out;
}

void expect_group_equal(const Checkpoint& a, const Checkpoint& b, const std::string& group) {
  const auto names = a.names(group);
  ASSERT_EQ(names, b.names(group)) << group;
  for (const auto& n : names) EXPECT_TRUE(bit_equal(a.get(group, n), b.get(group, n))) << group << "/" << n;
}

MetadataInput md_input(double month) {
  MetadataInput m;
  m.record = {10, 20, 0.5, 0.0, 2015, month, 10};
  return m;
}

}  // namespace

TEST(RunConfig, JsonRoundTripAndOverrides) {
  auto c = tiny_run(Task::kTemporal);
  c.optim.lr = 3e-4;
  c.guidance = 2.5;
  c.corruption = CorruptionKind::kNoise;
  RunConfig back = default_run_config(Task::kTemporal);
  apply_json(back, to_json(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(config_hash(back), config_hash(c));

  apply_override(back, "optim.lr=0.5");
  apply_override(back, "schedule=cosine");
  apply_override(back, "net.channel_mults=[1,2,2]");
  EXPECT_EQ(back.optim.lr, 0.5);
  EXPECT_EQ(back.schedule, ScheduleKind::kCosine);
  EXPECT_EQ(back.net.channel_mults, (std::vector<int>{1, 2, 2}));
  EXPECT_NE(config_hash(back), config_hash(c));

  EXPECT_THROW(apply_override(back, "optim.lrr=1"), ConfigError);
  EXPECT_THROW(apply_override(back, "schedule=linearish"), ConfigError);
  EXPECT_THROW(apply_override(back, "no_equals_sign"), ConfigError);
  EXPECT_THROW(parse_task("video"), ConfigError);

  auto bad = c;
  bad.metadata_dropout = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);

  EXPECT_EQ(default_run_config(Task::kVae).optim.lr, 5e-4);
  EXPECT_EQ(default_run_config(Task::kVae).batch_size, 8);
  EXPECT_EQ(default_run_config(Task::kSingleImage).optim.lr, 1e-4);
  EXPECT_EQ(default_run_config(Task::kSuperres).control.frame_channels, 10);
  for (const auto& [key, doc] : config_keys()) EXPECT_FALSE(doc.empty()) << key;
}

TEST(RunConfig, FileLoadingChecksTask) {
  auto dir = scratch("cfgfile");
  std::ofstream(dir / "c.json") << to_json(tiny_run(Task::kVae)).dump();
  auto loaded = load_run_config(Task::kVae, dir / "c.json", {"max_iters=7"});
  EXPECT_EQ(loaded.max_iters, 7);
  EXPECT_EQ(loaded.net, tiny_net());
  EXPECT_THROW(load_run_config(Task::kSingleImage, dir / "c.json", {}), ConfigError);
}

TEST(EpochSampler, PermutationsPerEpoch) {
  EpochSampler a(10, 3), b(10, 3);
  std::vector<std::size_t> all;
  for (int it = 0; it < 5; ++it) {
    auto idx = a.indices(it, 4);
    EXPECT_EQ(idx, b.indices(it, 4));
    all.insert(all.end(), idx.begin(), idx.end());
  }
  for (int epoch = 0; epoch < 2; ++epoch) {
    std::vector<std::size_t> e(all.begin() + epoch * 10, all.begin() + epoch * 10 + 10);
    std::sort(e.begin(), e.end());
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(e[i], i);
  }
}

TEST(SingleImage, InitialLossNearOneForZeroHead) {
  auto cfg = tiny_run(Task::kSingleImage);
  cfg.batch_size = 16;
  auto m = read_manifest(env().single);
  auto base = BaseModel::create(cfg, load_vae(env().vae_run));
  SingleImageData data(m, base, cfg);
  double sum = 0;
  for (int it = 0; it < 4; ++it) {
    auto b = data.batch(it);
    EXPECT_GE(b.t.min().item<std::int64_t>(), 1);
    EXPECT_LE(b.t.max().item<std::int64_t>(), 1000);
    torch::NoGradGuard ng;
    sum += diffusion_batch_loss(base, b).item<double>();
  }
  EXPECT_NEAR(sum / 4, 1.0, 0.1);
}

TEST(SingleImage, NullConditionTiesMetadataAndCaption) {
  auto cfg = tiny_run(Task::kSingleImage);
  cfg.metadata_dropout = 0.5;
  cfg.batch_size = 12;
  auto m = read_manifest(env().single);
  auto base = BaseModel::create(cfg, load_vae(env().vae_run));
  SingleImageData data(m, base, cfg);
  int dropped = 0;
  for (int it = 0; it < 8; ++it) {
    auto b = data.batch(it);
    for (std::int64_t i = 0; i < b.keep.size(0); ++i) {
      if (b.keep[i].item<float>() == 0.0f) {
        ++dropped;
        EXPECT_EQ(b.captions[static_cast<std::size_t>(i)], "");
      } else {
        EXPECT_FALSE(b.captions[static_cast<std::size_t>(i)].empty());
      }
    }
  }
  EXPECT_GT(dropped, 0);
}

TEST(SingleImage, FrozenVaeAndTextEncoder) {
  auto ck = Checkpoint::load(resolve_checkpoint_dir(env().base_run));
  auto vae_ck = Checkpoint::load(resolve_checkpoint_dir(env().vae_run));
  expect_group_equal(ck, vae_ck, "vae");
  // The text encoder is rebuilt from the seed; training must not have moved it.
  auto fresh = BaseModel::create(tiny_run(Task::kSingleImage), load_vae(env().vae_run));
  for (const auto& p : fresh.text->named_parameters(true))
    EXPECT_TRUE(bit_equal(p.value(), ck.get("text", p.key()))) << p.key();
  EXPECT_EQ(ck.meta()["vae_hash"], vae_ck.content_hash());
  for (const auto& n : fresh.trainable_names())
    EXPECT_TRUE(n.rfind("unet.", 0) == 0 || n.rfind("conditioner.", 0) == 0) << n;
}

TEST(SingleImage, RunDirectoryLayout) {
  const auto& run = env().base_run;
  EXPECT_TRUE(fs::exists(run / "config.json"));
  EXPECT_TRUE(fs::exists(run / "ckpt" / "manifest.json"));
  EXPECT_TRUE(fs::exists(run / "samples" / "grid_000004.png"));
  auto log = read_loss_log(run);
  ASSERT_EQ(log.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(log[static_cast<std::size_t>(i)].first, i);
  std::ifstream in(run / "train_log.jsonl");
  std::string line;
  std::getline(in, line);
  auto j = nlohmann::json::parse(line);
  for (const char* k : {"iter", "loss", "lr", "grad_norm", "wall"}) EXPECT_TRUE(j.contains(k)) << k;
  // config.json is reusable as --config.
  auto cfg = load_run_config(Task::kSingleImage, run / "config.json", {});
  EXPECT_EQ(cfg, tiny_run(Task::kSingleImage));
  auto ck = Checkpoint::load(run / "ckpt");
  EXPECT_EQ(ck.meta()["iteration"], 4);
  EXPECT_EQ(ck.meta()["config_hash"], config_hash(cfg));
}

TEST(SingleImage, ResumeIsBitIdentical) {
  auto dir = scratch("resume");
  auto cfg = tiny_run(Task::kSingleImage);
  cfg.max_iters = 14;
  cfg.ckpt_every = 100;
  TrainOptions full{env().single, dir / "full"};
  full.vae_ckpt = env().vae_run;
  train(cfg, full);

  auto part = cfg;
  part.max_iters = 4;
  TrainOptions split{env().single, dir / "split"};
  split.vae_ckpt = env().vae_run;
  train(part, split);
  EXPECT_THROW(train(cfg, split), ConfigError);  // existing checkpoint without resume
  auto changed = cfg;
  changed.optim.lr = 1e-3;
  split.resume = true;
  EXPECT_THROW(train(changed, split), ConfigError);
  auto r = train(cfg, split);
  EXPECT_EQ(r.start_iter, 4);
  EXPECT_EQ(r.end_iter, 14);

  auto a = Checkpoint::load(dir / "full" / "ckpt");
  auto b = Checkpoint::load(dir / "split" / "ckpt");
  for (const char* g : {"unet", "conditioner", "optim.exp_avg", "optim.exp_avg_sq", "optim.step"})
    expect_group_equal(a, b, g);
  EXPECT_EQ(log_losses(dir / "full"), log_losses(dir / "split"));
  EXPECT_EQ(a.meta()["loss_history"], b.meta()["loss_history"]);
}

TEST(SingleImage, MissingVaeNamesStageZero) {
  auto dir = scratch("novae");
  TrainOptions o{env().single, dir / "run"};
  try {
    train(tiny_run(Task::kSingleImage), o);
    FAIL();
  } catch (const DependencyError& e) {
    EXPECT_NE(std::string(e.what()).find("stage-0"), std::string::npos);
  }
  o.vae_ckpt = dir / "does_not_exist";
  try {
    train(tiny_run(Task::kSingleImage), o);
    FAIL();
  } catch (const DependencyError& e) {
    EXPECT_NE(std::string(e.what()).find("stage-0"), std::string::npos);
  }
}

TEST(SingleImage, NonFiniteLossAbortsWithDump) {
  auto dir = scratch("nonfinite");
  auto cfg = tiny_run(Task::kSingleImage);
  cfg.optim.lr = 1e30;
  cfg.grad_clip = 0;
  cfg.max_iters = 10;
  TrainOptions o{env().single, dir / "run"};
  o.vae_ckpt = env().vae_run;
  try {
    train(cfg, o);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("nonfinite_iter"), std::string::npos);
  }
  bool dumped = false;
  for (const auto& entry : fs::directory_iterator(dir / "run"))
    if (entry.path().filename().string().rfind("nonfinite_iter", 0) == 0) {
      dumped = true;
      auto ck = Checkpoint::load(entry.path());
      EXPECT_TRUE(ck.has("batch", "latents"));
      EXPECT_TRUE(ck.meta().contains("ids"));
    }
  EXPECT_TRUE(dumped);
}

class ControlTask : public ::testing::TestWithParam<Task> {};

TEST_P(ControlTask, InitialLossEqualsBaseAndBaseStaysFrozen) {
  const Task task = GetParam();
  auto cfg = control_cfg(task);
  auto base = BaseModel::load(resolve_checkpoint_dir(env().base_run));
  auto control = ControlModel::create(cfg, base);
  auto m = read_manifest(manifest_for(task));
  ControlData data(m, base, control, cfg);
  ASSERT_GT(data.size(), 0u);
  auto [batch, in] = data.batch(0);
  {
    torch::NoGradGuard ng;
    const double plain = diffusion_batch_loss(base, batch).item<double>();
    const double with = diffusion_batch_loss(base, batch, &control, &in).item<double>();
    EXPECT_NEAR(plain, with, 1e-6 * std::max(1.0, plain));
  }

  // One optimizer step on the branch leaves every base parameter untouched.
  set_requires_grad(*base.unet, false);
  set_requires_grad(*base.conditioner, false);
  std::map<std::string, torch::Tensor> before;
  for (const auto& p : base.unet->named_parameters(true)) before[p.key()] = p.value().clone();
  perturb(*control.net->zero_convs.back(), 0.01, 3);
  torch::optim::AdamW opt(control.net->parameters(), torch::optim::AdamWOptions(1e-3));
  diffusion_batch_loss(base, batch, &control, &in).backward();
  opt.step();
  for (const auto& p : base.unet->named_parameters(true)) {
    EXPECT_TRUE(bit_equal(p.value(), before[p.key()])) << p.key();
    EXPECT_FALSE(p.value().grad().defined());
  }

  // The full trainer leaves the base checkpoint as it was and records its hash.
  const auto base_hash = checkpoint_hash(resolve_checkpoint_dir(env().base_run));
  auto dir = scratch("control_" + to_string(task));
  auto tcfg = cfg;
  tcfg.max_iters = 2;
  TrainOptions o{manifest_for(task), dir};
  o.base_ckpt = env().base_run;
  auto r = train(tcfg, o);
  EXPECT_EQ(r.losses.size(), 2u);
  EXPECT_EQ(checkpoint_hash(resolve_checkpoint_dir(env().base_run)), base_hash);
  auto ck = Checkpoint::load(dir / "ckpt");
  EXPECT_EQ(ck.meta()["base_hash"], base_hash);
  EXPECT_FALSE(ck.has_group("unet"));
  auto reloaded = ControlModel::load(dir / "ckpt", base);
  EXPECT_EQ(reloaded.base_hash, base_hash);
}

INSTANTIATE_TEST_SUITE_P(AllControlTasks, ControlTask,
                         ::testing::Values(Task::kSuperres, Task::kTemporal, Task::kInpaint),
                         [](const auto& info) { return to_string(info.param); });

TEST(ControlTraining, RejectsMismatchedNetworkConfig) {
  auto base = BaseModel::load(resolve_checkpoint_dir(env().base_run));
  auto cfg = control_cfg(Task::kSuperres);
  cfg.net.base_channels = 8;
  EXPECT_THROW(ControlModel::create(cfg, base), ConfigError);
  auto dir = scratch("control_nobase");
  TrainOptions o{env().superres, dir};
  EXPECT_THROW(train(control_cfg(Task::kSuperres), o), DependencyError);
}

TEST(ControlTraining, TemporalShuffleGivesSameLoss) {
  auto cfg = control_cfg(Task::kTemporal);
  cfg.batch_size = 3;
  auto base = BaseModel::load(resolve_checkpoint_dir(env().base_run));
  auto control = ControlModel::create(cfg, base);
  perturb(*control.net, 0.02, 4);
  auto m = read_manifest(env().temporal);
  ControlData data(m, base, control, cfg);
  torch::NoGradGuard ng;
  for (int it = 0; it < 3; ++it) {
    auto [b1, in1] = data.batch(it, false);
    auto [b2, in2] = data.batch(it, true);
    EXPECT_TRUE(bit_equal(b1.eps, b2.eps));
    const double l1 = diffusion_batch_loss(base, b1, &control, &in1).item<double>();
    const double l2 = diffusion_batch_loss(base, b2, &control, &in2).item<double>();
    EXPECT_NEAR(l1, l2, 1e-5);
  }
}

class Sampling : public ::testing::Test {
 protected:
  void SetUp() override {
    base = BaseModel::load(resolve_checkpoint_dir(env().base_run));
    // A trained-looking head so samples depend on the conditioning.
    perturb(*base.unet, 0.02, 5);
    perturb(*base.conditioner, 0.05, 6);
  }
  BaseModel base;
};

TEST_F(Sampling, DeterministicPerSeed) {
  SampleOptions o;
  o.steps = 5;
  o.seed = 3;
  o.n = 2;
  auto a = sample_single(base, "a synthetic satellite image", md_input(4), o);
  auto b = sample_single(base, "a synthetic satellite image", md_input(4), o);
  EXPECT_TRUE(bit_equal(a, b));
  EXPECT_EQ(a.sizes().vec(), (std::vector<std::int64_t>{2, 3, 32, 32}));
  EXPECT_LE(a.abs().max().item<float>(), 1.0f);
  o.seed = 4;
  EXPECT_FALSE(bit_equal(a, sample_single(base, "a synthetic satellite image", md_input(4), o)));
  o.seed = 3;
  o.eta = 1.0;
  auto s1 = sample_single(base, "x", md_input(4), o);
  EXPECT_TRUE(bit_equal(s1, sample_single(base, "x", md_input(4), o)));
}

TEST_F(Sampling, GuidanceOneMatchesConditionalOnlyOracle) {
  SampleOptions o;
  o.steps = 6;
  o.seed = 8;
  const std::string cap = "a synthetic satellite image of a port";
  auto got = sample_single(base, cap, md_input(7), o);

  // Independent loop that evaluates both branches and mixes them at w = 1.
  torch::NoGradGuard ng;
  const auto& net = base.config.net;
  auto rng = stream_rng(o.seed, Stream::kSample, 0);
  auto z = rng.normal({1, net.latent_channels, net.latent_size(), net.latent_size()});
  auto md = normalized_batch({md_input(7).record});
  auto tc = base.text->encode({cap});
  auto tu = base.text->encode({""});
  const auto ts = ddim_timesteps(1000, o.steps);
  for (int i = 0; i < o.steps; ++i) {
    auto tt = torch::full({1}, static_cast<float>(ts[i]));
    auto pc = base.unet(z, base.conditioner(md, tt, torch::ones({1})), tc);
    auto pu = base.unet(z, base.conditioner(md, tt, torch::zeros({1})), tu);
    auto pred = pu + (pc - pu) * 1.0;
    z = ddim_step(z, pred, ts[i], ts[i + 1], PredictionMode::kEpsilon, base.schedule);
  }
  auto expect = base.vae->decode(z).clamp(-1, 1);
  EXPECT_LT(max_abs_diff(got, expect), 1e-6);

  o.guidance = 3.0;
  EXPECT_GT(max_abs_diff(got, sample_single(base, cap, md_input(7), o)), 0.0);
}

TEST_F(Sampling, PartialMetadataDropsOnlyMissingTerms) {
  SampleOptions o;
  o.steps = 4;
  o.seed = 9;
  auto full = md_input(7);
  auto partial = full;
  partial.present[2] = false;  // no gsd
  auto none = full;
  none.present.fill(false);
  auto a = sample_single(base, "c", full, o);
  auto b = sample_single(base, "c", partial, o);
  auto c = sample_single(base, "c", none, o);
  EXPECT_GT(max_abs_diff(a, b), 0.0);
  EXPECT_GT(max_abs_diff(b, c), 0.0);
}

TEST_F(Sampling, FreshControlBranchMatchesSampleSingle) {
  auto cfg = control_cfg(Task::kTemporal);
  auto control = ControlModel::create(cfg, base);
  ControlSequence seq;
  seq.frames = torch::rand({4, 3, 32, 32}) * 2 - 1;
  for (int i = 0; i < 4; ++i) seq.frame_metadata.push_back(md_input(1 + i).record);
  seq.caption = "a synthetic satellite image";
  seq.target_metadata = md_input(9).record;
  SampleOptions o;
  o.steps = 5;
  o.seed = 10;
  auto a = sample_conditional(base, control, seq, o);
  auto b = sample_single(base, seq.caption, MetadataInput{seq.target_metadata}, o);
  EXPECT_LT(max_abs_diff(a, b), 1e-5);
}

TEST_F(Sampling, JointFramePermutationLeavesSamplesUnchanged) {
  auto cfg = control_cfg(Task::kTemporal);
  auto control = ControlModel::create(cfg, base);
  perturb(*control.net, 0.02, 11);
  ControlSequence seq;
  seq.frames = torch::rand({4, 3, 32, 32}) * 2 - 1;
  for (int i = 0; i < 4; ++i) seq.frame_metadata.push_back(md_input(2 + 3 * i).record);
  seq.caption = "c";
  seq.target_metadata = md_input(12).record;
  auto perm = seq;
  const std::vector<std::int64_t> order = {2, 0, 3, 1};
  perm.frames = seq.frames.index_select(0, torch::tensor(order));
  for (std::size_t i = 0; i < 4; ++i)
    perm.frame_metadata[i] = seq.frame_metadata[static_cast<std::size_t>(order[i])];
  SampleOptions o;
  o.steps = 5;
  o.seed = 12;
  auto a = sample_conditional(base, control, seq, o);
  auto b = sample_conditional(base, control, perm, o);
  EXPECT_LT(max_abs_diff(a, b), 1e-4);
  ControlSequence wrong = seq;
  wrong.frame_metadata.pop_back();
  EXPECT_THROW(sample_conditional(base, control, wrong, o), ContractViolation);
}

TEST_F(Sampling, AutoregressiveTraceAndDegenerateCase) {
  auto cfg = control_cfg(Task::kTemporal);
  auto control = ControlModel::create(cfg, base);
  perturb(*control.net, 0.02, 13);
  SampleOptions o;
  o.steps = 4;
  o.seed = 14;
  std::vector<MetadataRecord> seq;
  for (int y = 0; y < 4; ++y) {
    auto r = md_input(6).record;
    r.year = 2010 + y;
    seq.push_back(r);
  }
  auto one = autoregressive_generate(base, control, "c", {seq[0]}, o);
  ASSERT_EQ(one.images.size(0), 1);
  EXPECT_TRUE(bit_equal(one.images[0], sample_single(base, "c", MetadataInput{seq[0]}, o)[0]));

  auto four = autoregressive_generate(base, control, "c", seq, o);
  ASSERT_EQ(four.images.size(0), 4);
  ASSERT_EQ(four.trace.size(), 4u);
  EXPECT_TRUE(bit_equal(four.images[0], one.images[0]));
  const std::vector<std::vector<int>> expect = {{}, {0, 0, 0, 0}, {0, 1, 1, 1}, {0, 1, 2, 2}};
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(four.trace[k].conditioning, expect[k]) << "step " << k;
    EXPECT_EQ(four.trace[k].target, seq[k]);
    std::set<int> used(four.trace[k].conditioning.begin(), four.trace[k].conditioning.end());
    EXPECT_EQ(used.size(), k);  // every earlier frame, nothing else
  }
  EXPECT_EQ(four.trace[2].seed, mix_seed(o.seed, 2));
  auto again = autoregressive_generate(base, control, "c", seq, o);
  EXPECT_TRUE(bit_equal(four.images, again.images));

  auto dir = scratch("trace");
  write_trace_jsonl(dir / "trace.jsonl", four.trace);
  std::ifstream in(dir / "trace.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 4);
}
