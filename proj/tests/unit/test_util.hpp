#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>

#include "diffsat/config.hpp"
#include "diffsat/networks.hpp"
#include "diffsat/pipeline.hpp"

namespace diffsat::testing_util {

namespace fs = std::filesystem;

/// Small enough for sub-second forward passes: 32x32 images, 4x4 latents.
inline NetworkConfig tiny_net() {
  NetworkConfig c;
  c.image_size = 32;
  c.vae_channels = {8, 8, 16, 16};
  c.base_channels = 16;
  c.channel_mults = {1, 2};
  c.attention_resolutions = {4, 2};
  c.norm_groups = 4;
  c.cond_dim = 64;
  c.proj_dim = 32;
  c.text_dim = 32;
  c.text_len = 16;
  c.vocab_size = 512;
  c.text_layers = 1;
  return c;
}

inline RunConfig tiny_run(Task task) {
  RunConfig c = default_run_config(task);
  c.net = tiny_net();
  c.batch_size = 4;
  c.max_iters = 4;
  c.ckpt_every = 2;
  c.sample_steps = 4;
  c.seed = 11;
  return c;
}

/// Fresh scratch directory under the build tree.
inline fs::path scratch(const std::string& name) {
  fs::path p = fs::path(DIFFSAT_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Adds N(0, scale^2) noise to every parameter (moves zero-init layers off zero).
inline void perturb(torch::nn::Module& m, double scale, std::uint64_t seed) {
  torch::NoGradGuard ng;
  Rng rng(seed);
  for (auto& p : m.parameters(true)) p.add_(rng.normal(p.sizes()) * scale);
}

inline BaseModel tiny_base(const RunConfig& cfg) {
  torch::manual_seed(static_cast<std::uint64_t>(cfg.seed) + 1);
  Vae vae(cfg.net);
  return BaseModel::create(cfg, vae);
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

inline bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes() == b.sizes() && a.dtype() == b.dtype() && torch::equal(a, b);
}

}  // namespace diffsat::testing_util
