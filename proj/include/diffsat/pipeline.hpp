#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "diffsat/config.hpp"
#include "diffsat/control3d.hpp"
#include "diffsat/metadata.hpp"
#include "diffsat/networks.hpp"
#include "diffsat/rng.hpp"

namespace diffsat {

namespace fs = std::filesystem;

/// Independent random streams derived from the root seed.
enum class Stream : std::uint64_t { kData = 1, kDropout = 2, kNoise = 3, kInit = 4, kSample = 5 };
/// Stream `s` at counter `k` (iteration, epoch, step, ...).
Rng stream_rng(std::uint64_t seed, Stream s, std::uint64_t k);

/// Accepts a checkpoint directory or a run directory holding `ckpt/`.
fs::path resolve_checkpoint_dir(const fs::path& p);

/// Frozen VAE and text encoder plus the denoiser and its conditioner.
struct BaseModel {
  RunConfig config;
  Vae vae{nullptr};
  TextEncoder text{nullptr};
  UNet unet{nullptr};
  Conditioner conditioner{nullptr};
  NoiseSchedule schedule;
  /// Content hash of the checkpoint this was loaded from ("" when fresh).
  std::string hash;

  /// Fresh denoiser and conditioner around the given VAE; the text encoder is
  /// initialized from the config seed.
  static BaseModel create(const RunConfig& cfg, Vae vae);
  /// Throws DependencyError when the checkpoint is missing or is not a
  /// single_image checkpoint.
  static BaseModel load(const fs::path& dir);

  /// Text embeddings without gradients, memoized per caption.
  TextEmbedding encode_text(const std::vector<std::string>& captions);

  std::vector<std::string> trainable_names() const;
  std::vector<torch::Tensor> trainable_parameters() const;

 private:
  std::map<std::string, std::pair<torch::Tensor, torch::Tensor>> text_cache_;
};

/// Loads a stage-0 VAE checkpoint.
Vae load_vae(const fs::path& dir, std::string* hash = nullptr, RunConfig* config = nullptr);

struct ControlModel {
  RunConfig config;
  ControlNet3d net{nullptr};
  std::string base_hash;

  /// Fresh branch copied from the base; throws ConfigError when the network
  /// configs disagree.
  static ControlModel create(const RunConfig& cfg, BaseModel& base);
  /// Throws DependencyError when the checkpoint was trained against another base.
  static ControlModel load(const fs::path& dir, BaseModel& base);
};

struct SampleOptions {
  int steps = 100;
  double guidance = 1.0;
  double eta = 0.0;
  std::uint64_t seed = 0;
  int n = 1;
};

/// Metadata for sampling; absent fields contribute nothing to m, and with
/// every field absent m is the zero vector of the dropout-trained null.
struct MetadataInput {
  MetadataRecord record;
  std::array<bool, kNumMetadataFields> present{true, true, true, true, true, true, true};
  bool any() const;
};

/// Per-row conditioning for a sampling batch.
struct SampleBatch {
  std::vector<std::string> captions;
  std::vector<MetadataInput> metadata;
  /// Control latents [B, T, C, h, w] (already encoded), or undefined.
  torch::Tensor control;
};

/// DDIM sampling in latent space. Returns decoded images [B, 3, H, W] in
/// [-1, 1]. `z_T` is drawn from stream kSample of `opts.seed`.
torch::Tensor sample_batch(BaseModel& base, ControlModel* control, const SampleBatch& batch,
                           const SampleOptions& opts);

torch::Tensor sample_single(BaseModel& base, const std::string& caption, const MetadataInput& md,
                            const SampleOptions& opts);

/// Encodes `seq` once and samples `opts.n` images conditioned on it.
/// target_metadata drives c and the per-frame metadata drives the branch.
torch::Tensor sample_conditional(BaseModel& base, ControlModel& control,
                                 const ControlSequence& seq, const SampleOptions& opts);

/// Control latents [B, T, C, h, w] for a batch of sequences of equal length.
torch::Tensor encode_sequences(BaseModel& base, ControlModel& control,
                               const std::vector<ControlSequence>& seqs);

struct AutoregressiveStep {
  int index = 0;
  std::uint64_t seed = 0;
  MetadataRecord target;
  /// Indices of the generated frames used as conditioning, after padding.
  std::vector<int> conditioning;
};

struct AutoregressiveResult {
  torch::Tensor images;  // [K, 3, H, W] in [-1, 1], in metadata order
  std::vector<AutoregressiveStep> trace;
};

/// Step 0 samples without control using `opts.seed`; step k >= 1 conditions on
/// every earlier frame (padded to the branch's frame count) with seed
/// mix_seed(opts.seed, k). `opts.n` is ignored (one image per step).
AutoregressiveResult autoregressive_generate(BaseModel& base, ControlModel& control,
                                             const std::string& caption,
                                             const std::vector<MetadataRecord>& metadata_seq,
                                             const SampleOptions& opts);

void write_trace_jsonl(const fs::path& path, const std::vector<AutoregressiveStep>& trace);

}  // namespace diffsat
