#include "diffsat/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "diffsat/errors.hpp"

namespace diffsat {

PredictionMode parse_prediction_mode(std::string_view s) {
  if (s == "epsilon") return PredictionMode::kEpsilon;
  if (s == "sample") return PredictionMode::kSample;
  if (s == "velocity") return PredictionMode::kVelocity;
  throw ConfigError("unknown prediction mode '" + std::string(s) +
                    "' (expected epsilon|sample|velocity)");
}

std::string to_string(PredictionMode m) {
  switch (m) {
    case PredictionMode::kEpsilon: return "epsilon";
    case PredictionMode::kSample: return "sample";
    case PredictionMode::kVelocity: return "velocity";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "scaled_linear") return ScheduleKind::kScaledLinear;
  if (s == "cosine") return ScheduleKind::kCosine;
  throw ConfigError("unknown schedule kind '" + std::string(s) +
                    "' (expected scaled_linear|cosine)");
}

std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::kScaledLinear ? "scaled_linear" : "cosine";
}

NoiseSchedule build_schedule(int num_steps, ScheduleKind kind, const ScheduleOptions& opts) {
  if (num_steps < 1) throw ConfigError("num_steps must be >= 1");
  NoiseSchedule s;
  s.num_steps = num_steps;
  s.alphas.resize(static_cast<std::size_t>(num_steps) + 1);
  s.sigmas.resize(static_cast<std::size_t>(num_steps) + 1);

  // alpha_bar[t] = prod_{s<=t} (1 - beta_s), alpha_bar[0] = 1.
  std::vector<double> alpha_bar(static_cast<std::size_t>(num_steps) + 1, 1.0);
  if (kind == ScheduleKind::kScaledLinear) {
    const double a = std::sqrt(opts.beta_start);
    const double b = std::sqrt(opts.beta_end);
    for (int t = 1; t <= num_steps; ++t) {
      const double frac = num_steps == 1 ? 0.0 : double(t - 1) / double(num_steps - 1);
      const double root = a + (b - a) * frac;
      alpha_bar[t] = alpha_bar[t - 1] * (1.0 - root * root);
    }
  } else {
    const double off = opts.cosine_offset;
    auto f = [&](double t) {
      const double c = std::cos((t / num_steps + off) / (1.0 + off) * std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    for (int t = 1; t <= num_steps; ++t) {
      double beta = 1.0 - (f(t) / f0) / (f(t - 1) / f0);
      beta = std::clamp(beta, 0.0, 0.999);
      alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta);
    }
  }
  for (int t = 0; t <= num_steps; ++t) {
    s.alphas[t] = std::sqrt(alpha_bar[t]);
    s.sigmas[t] = std::sqrt(1.0 - alpha_bar[t]);
  }
  return s;
}

namespace {

void check_timestep(int t, const NoiseSchedule& sched) {
  DIFFSAT_EXPECT(t >= 0 && t <= sched.num_steps,
                 "timestep " + std::to_string(t) + " outside [0, " +
                     std::to_string(sched.num_steps) + "]");
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  DIFFSAT_EXPECT(a.sizes() == b.sizes(), std::string(what) + ": shape mismatch");
}

// Per-row coefficient tensor shaped [B, 1, 1, ...] to broadcast against `like`.
torch::Tensor gather(const std::vector<double>& table, const torch::Tensor& t,
                     const torch::Tensor& like) {
  DIFFSAT_EXPECT(t.dim() == 1 && t.size(0) == like.size(0),
                 "timestep tensor must have one entry per batch row");
  auto idx = t.to(torch::kLong).contiguous();
  std::vector<double> vals(static_cast<std::size_t>(idx.size(0)));
  const auto* p = idx.data_ptr<std::int64_t>();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    DIFFSAT_EXPECT(p[i] >= 0 && p[i] < static_cast<std::int64_t>(table.size()),
                   "timestep out of range");
    vals[i] = table[static_cast<std::size_t>(p[i])];
  }
  std::vector<std::int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  shape[0] = idx.size(0);
  return torch::tensor(vals, torch::kFloat64).reshape(shape).to(like.options());
}

}  // namespace

torch::Tensor add_noise(const torch::Tensor& z, int t, const torch::Tensor& eps,
                        const NoiseSchedule& sched) {
  check_same_shape(z, eps, "add_noise");
  check_timestep(t, sched);
  return z * sched.alpha(t) + eps * sched.sigma(t);
}

torch::Tensor add_noise(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& eps,
                        const NoiseSchedule& sched) {
  check_same_shape(z, eps, "add_noise");
  return gather(sched.alphas, t, z) * z + gather(sched.sigmas, t, z) * eps;
}

torch::Tensor compute_target(const torch::Tensor& z, const torch::Tensor& eps, int t,
                             PredictionMode mode, const NoiseSchedule& sched) {
  check_same_shape(z, eps, "compute_target");
  check_timestep(t, sched);
  switch (mode) {
    case PredictionMode::kEpsilon: return eps;
    case PredictionMode::kSample: return z;
    case PredictionMode::kVelocity: return eps * sched.alpha(t) - z * sched.sigma(t);
  }
  return eps;
}

torch::Tensor compute_target(const torch::Tensor& z, const torch::Tensor& eps,
                             const torch::Tensor& t, PredictionMode mode,
                             const NoiseSchedule& sched) {
  check_same_shape(z, eps, "compute_target");
  switch (mode) {
    case PredictionMode::kEpsilon: return eps;
    case PredictionMode::kSample: return z;
    case PredictionMode::kVelocity:
      return gather(sched.alphas, t, z) * eps - gather(sched.sigmas, t, z) * z;
  }
  return eps;
}

torch::Tensor diffusion_loss(const torch::Tensor& pred, const torch::Tensor& target) {
  check_same_shape(pred, target, "diffusion_loss");
  return (target - pred).pow(2).mean();
}

Estimates estimates_from_prediction(const torch::Tensor& z_t, const torch::Tensor& pred, int t,
                                    PredictionMode mode, const NoiseSchedule& sched) {
  check_same_shape(z_t, pred, "estimates_from_prediction");
  check_timestep(t, sched);
  const double a = sched.alpha(t);
  const double s = sched.sigma(t);
  switch (mode) {
    case PredictionMode::kEpsilon:
      return {(z_t - pred * s) / a, pred};
    case PredictionMode::kSample:
      return {pred, (z_t - pred * a) / s};
    case PredictionMode::kVelocity:
      return {z_t * a - pred * s, z_t * s + pred * a};
  }
  return {};
}

torch::Tensor ddim_step(const torch::Tensor& z_t, const torch::Tensor& pred, int t, int t_prev,
                        PredictionMode mode, const NoiseSchedule& sched, double eta,
                        const torch::Tensor& noise) {
  DIFFSAT_EXPECT(t_prev < t, "ddim_step requires t_prev < t");
  DIFFSAT_EXPECT(eta >= 0.0 && eta <= 1.0, "eta must lie in [0, 1]");
  check_timestep(t_prev, sched);
  auto est = estimates_from_prediction(z_t, pred, t, mode, sched);

  const double a_prev = sched.alpha(t_prev);
  const double s_prev = sched.sigma(t_prev);
  if (eta == 0.0) return est.sample * a_prev + est.noise * s_prev;

  DIFFSAT_EXPECT(noise.defined(), "ddim_step with eta > 0 needs a noise tensor");
  check_same_shape(z_t, noise, "ddim_step noise");
  // sigma_eta = eta * sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev)
  const double ab_t = sched.alpha(t) * sched.alpha(t);
  const double ab_prev = a_prev * a_prev;
  const double s_t = sched.sigma(t);
  const double sigma_eta =
      eta * std::sqrt(s_prev * s_prev / (s_t * s_t)) * std::sqrt(1.0 - ab_t / ab_prev);
  const double dir = std::sqrt(std::max(0.0, s_prev * s_prev - sigma_eta * sigma_eta));
  return est.sample * a_prev + est.noise * dir + noise * sigma_eta;
}

std::vector<int> ddim_timesteps(int num_train_steps, int sampling_steps) {
  if (sampling_steps < 1 || sampling_steps > num_train_steps)
    throw ConfigError("sampling steps must lie in [1, num_train_steps]");
  std::vector<int> ts(static_cast<std::size_t>(sampling_steps) + 1);
  for (int i = 0; i <= sampling_steps; ++i) {
    const double frac = 1.0 - double(i) / sampling_steps;
    ts[i] = static_cast<int>(std::lround(frac * num_train_steps));
  }
  return ts;
}

torch::Tensor cfg_combine(const torch::Tensor& pred_uncond, const torch::Tensor& pred_cond,
                          double w) {
  check_same_shape(pred_uncond, pred_cond, "cfg_combine");
  if (w == 1.0) return pred_cond;
  if (w == 0.0) return pred_uncond;
  return pred_uncond + (pred_cond - pred_uncond) * w;
}

}  // namespace diffsat
