#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "diffsat/control3d.hpp"
#include "diffsat/diffusion.hpp"
#include "diffsat/networks.hpp"
#include "diffsat/optim.hpp"
#include "diffsat/preprocess.hpp"

namespace diffsat {

enum class Task { kVae, kSingleImage, kSuperres, kTemporal, kInpaint };

Task parse_task(std::string_view s);
std::string to_string(Task t);
inline bool is_control_task(Task t) {
  return t == Task::kSuperres || t == Task::kTemporal || t == Task::kInpaint;
}

/// Everything that determines a training run.
///
/// Defaults are desk scale. The full-scale values (lr 2e-6, batch 128,
/// 512x512 images) are reachable through the same keys.
struct RunConfig {
  Task task = Task::kSingleImage;
  NetworkConfig net;
  ControlConfig control;

  ScheduleKind schedule = ScheduleKind::kScaledLinear;
  int num_train_steps = 1000;
  ScheduleOptions schedule_opts;
  PredictionMode prediction = PredictionMode::kEpsilon;

  AdamWOptions optim;
  double grad_clip = 1.0;  // <= 0 disables clipping
  int batch_size = 16;
  int max_iters = 2000;
  std::uint64_t seed = 0;

  double metadata_dropout = 0.1;
  double caption_dropout = 0.1;
  bool metadata_in_caption = false;

  int sample_steps = 100;
  double guidance = 1.0;
  double eta = 0.0;

  int ckpt_every = 500;
  int sample_every = 0;  // 0: only after the last iteration
  /// Records at the end of the manifest kept out of training.
  int holdout = 0;

  double vae_kl_weight = 1e-6;
  int temporal_frames = 4;
  CorruptionKind corruption = CorruptionKind::kCloudWhite;
  /// Metadata value given to super-resolution control frames (low-res gsd).
  double superres_frame_gsd = 10.0;

  NoiseSchedule build_noise_schedule() const;
  /// Throws ConfigError on inconsistent settings.
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Defaults for a task: vae uses lr 5e-4 and batch 8, everything else lr 1e-4
/// and batch 16. Control tasks set the frame channels they need.
RunConfig default_run_config(Task task);

/// Flat key namespace ("optim.lr", "net.base_channels", ...).
nlohmann::json to_json(const RunConfig& c);
/// Applies every key of a flat object; unknown keys raise ConfigError.
void apply_json(RunConfig& c, const nlohmann::json& flat);
/// Applies one "key=value" override. The value is parsed as JSON when
/// possible, otherwise taken as a string.
void apply_override(RunConfig& c, const std::string& assignment);

struct ConfigKeyDoc {
  std::string key;
  std::string doc;
};
std::vector<ConfigKeyDoc> config_keys();

/// Task defaults, then the config file's keys, then overrides. A "task" key in
/// the file must agree with `task`.
RunConfig load_run_config(Task task, const std::filesystem::path& file,
                          const std::vector<std::string>& overrides);

/// Short hex digest of the serialized config.
std::string config_hash(const RunConfig& c);

}  // namespace diffsat
