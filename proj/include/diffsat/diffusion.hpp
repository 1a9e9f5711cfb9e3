#pragma once

#include <torch/torch.h>

#include <string>
#include <string_view>
#include <vector>

namespace diffsat {

enum class PredictionMode { kEpsilon, kSample, kVelocity };
enum class ScheduleKind { kScaledLinear, kCosine };

PredictionMode parse_prediction_mode(std::string_view s);
std::string to_string(PredictionMode m);
ScheduleKind parse_schedule_kind(std::string_view s);
std::string to_string(ScheduleKind k);

/// Variance-preserving noise schedule with T+1 entries (t = 0..T).
///
/// alphas[t]^2 + sigmas[t]^2 == 1; index 0 is clean data (alpha 1, sigma 0).
/// Coefficients are held in double precision and cast at use sites.
struct NoiseSchedule {
  int num_steps = 0;
  std::vector<double> alphas;
  std::vector<double> sigmas;

  double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t)); }
  double sigma(int t) const { return sigmas.at(static_cast<std::size_t>(t)); }
};

struct ScheduleOptions {
  double beta_start = 0.00085;
  double beta_end = 0.012;
  double cosine_offset = 0.008;

  bool operator==(const ScheduleOptions&) const = default;
};

NoiseSchedule build_schedule(int num_steps, ScheduleKind kind, const ScheduleOptions& opts = {});

/// x_t = alpha_t * z + sigma_t * eps.
torch::Tensor add_noise(const torch::Tensor& z, int t, const torch::Tensor& eps,
                        const NoiseSchedule& sched);
/// Batched variant: `t` is an int64 tensor of shape [B], one timestep per leading row.
torch::Tensor add_noise(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& eps,
                        const NoiseSchedule& sched);

torch::Tensor compute_target(const torch::Tensor& z, const torch::Tensor& eps, int t,
                             PredictionMode mode, const NoiseSchedule& sched);
torch::Tensor compute_target(const torch::Tensor& z, const torch::Tensor& eps,
                             const torch::Tensor& t, PredictionMode mode,
                             const NoiseSchedule& sched);

/// Mean squared error over all elements.
torch::Tensor diffusion_loss(const torch::Tensor& pred, const torch::Tensor& target);

/// Clean-sample and noise estimates recovered from a model prediction at step t.
struct Estimates {
  torch::Tensor sample;
  torch::Tensor noise;
};
Estimates estimates_from_prediction(const torch::Tensor& z_t, const torch::Tensor& pred, int t,
                                    PredictionMode mode, const NoiseSchedule& sched);

/// One DDIM update from t to t_prev. `noise` is required when eta > 0.
torch::Tensor ddim_step(const torch::Tensor& z_t, const torch::Tensor& pred, int t, int t_prev,
                        PredictionMode mode, const NoiseSchedule& sched, double eta = 0.0,
                        const torch::Tensor& noise = {});

/// Descending timesteps T = s_0 > s_1 > ... > s_steps = 0, uniform stride.
std::vector<int> ddim_timesteps(int num_train_steps, int sampling_steps);

/// u + w (c - u); w == 1 returns c and w == 0 returns u exactly.
torch::Tensor cfg_combine(const torch::Tensor& pred_uncond, const torch::Tensor& pred_cond,
                          double w);

}  // namespace diffsat
