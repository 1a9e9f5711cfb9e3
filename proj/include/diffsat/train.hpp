#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "diffsat/config.hpp"
#include "diffsat/manifest.hpp"
#include "diffsat/pipeline.hpp"

namespace diffsat {

namespace fs = std::filesystem;

/// Deterministic epoch-wise shuffling: position p of the stream of indices is
/// perm(p / n)[p % n], with each permutation drawn from stream kData.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed);
  std::vector<std::size_t> indices(std::int64_t iter, int batch);

 private:
  const std::vector<std::size_t>& perm(std::int64_t epoch);
  std::size_t n_;
  std::uint64_t seed_;
  std::map<std::int64_t, std::vector<std::size_t>> cache_;
};

/// One diffusion training batch in latent space.
struct DiffusionBatch {
  std::vector<std::string> ids;
  torch::Tensor latents;   // [B, C', h, w] scaled clean latents
  torch::Tensor metadata;  // [B, 7] normalized
  torch::Tensor keep;      // [B] 1 = metadata kept, 0 = null condition
  std::vector<std::string> captions;
  torch::Tensor t;    // [B] int64 in [1, T]
  torch::Tensor eps;  // like latents
};

/// Conditioning frames for a control batch.
struct ControlInput {
  torch::Tensor frames;    // [B, T, C, H, W] raw frames, or [B, T, C_lat, h, w] when encoded
  torch::Tensor frame_md;  // [B, T, 7] normalized
  bool encoded = false;
};

/// Control latents (with metadata channels) for a batch.
torch::Tensor control_latents(BaseModel& base, ControlModel& control, const ControlInput& in);

/// Diffusion loss of the base denoiser, with the control branch's residuals
/// when `control` is given.
torch::Tensor diffusion_batch_loss(BaseModel& base, const DiffusionBatch& b,
                                   ControlModel* control = nullptr,
                                   const ControlInput* in = nullptr);

/// Images of a manifest as [N, C, S, S] in [-1, 1].
torch::Tensor load_images(const Manifest& m, const std::vector<std::size_t>& rows, int size);

/// Training records of a manifest (the trailing `holdout` rows removed).
std::vector<std::size_t> training_rows(const Manifest& m, int holdout);

/// Single-image diffusion data: cached latents plus captions and metadata.
class SingleImageData {
 public:
  SingleImageData(const Manifest& m, BaseModel& base, const RunConfig& cfg);
  DiffusionBatch batch(std::int64_t iter);
  std::size_t size() const { return rows_.size(); }
  /// First n records without dropout, for preview grids.
  SampleBatch preview(int n) const;

 private:
  const Manifest& manifest_;
  RunConfig cfg_;
  std::vector<std::size_t> rows_;
  torch::Tensor latents_;
  torch::Tensor metadata_;
  EpochSampler sampler_;
};

/// Control-task data: one item per training pair (superres, inpaint) or per
/// sequence (temporal).
class ControlData {
 public:
  ControlData(const Manifest& m, BaseModel& base, ControlModel& control, const RunConfig& cfg);
  /// `shuffle_frames` permutes each item's conditioning frames (and their
  /// metadata) without touching any other draw.
  std::pair<DiffusionBatch, ControlInput> batch(std::int64_t iter, bool shuffle_frames = false);
  std::size_t size() const { return items_.size(); }
  std::pair<SampleBatch, ControlInput> preview(int n);

 private:
  struct Item {
    std::size_t target;                // manifest row of the target image
    std::vector<std::size_t> frames;   // rows of candidate frames (temporal)
  };
  struct Assembled {
    torch::Tensor frames;  // [T, ...]
    torch::Tensor md;      // [T, 7]
    std::size_t target;
  };
  Assembled assemble(const Item& item, Rng& data_rng, bool preview);

  const Manifest& manifest_;
  RunConfig cfg_;
  std::vector<Item> items_;
  std::map<std::size_t, std::size_t> slot_;  // manifest row -> cache row
  torch::Tensor target_latents_;             // per cache row
  torch::Tensor frame_cache_;                // encoded frames or raw control frames
  torch::Tensor masks_;                      // inpaint masks [N, H, W]
  EpochSampler sampler_;
};

struct TrainOptions {
  fs::path manifest;
  fs::path out;
  fs::path vae_ckpt;   // single_image
  fs::path base_ckpt;  // control tasks
  bool resume = false;
  std::ostream* progress = nullptr;
  int progress_every = 50;
};

struct TrainResult {
  int start_iter = 0;
  int end_iter = 0;
  std::vector<double> losses;  // losses of the iterations run by this call
  fs::path checkpoint;
};

/// Runs the task's training loop into a run directory: config.json,
/// train_log.jsonl, ckpt/ and samples/.
TrainResult train(const RunConfig& cfg, const TrainOptions& opts);

/// (iter, loss) pairs of a run's log.
std::vector<std::pair<int, double>> read_loss_log(const fs::path& run_dir);

}  // namespace diffsat
