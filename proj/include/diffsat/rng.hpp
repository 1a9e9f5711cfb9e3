#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace diffsat {

/// Seeded random stream with a serializable state.
///
/// All stochastic choices in training and sampling (data order, timesteps,
/// noise, dropout) draw from explicit Rng instances so a run can be checkpointed
/// and resumed bit-exactly. Normal variates use Box-Muller without caching a
/// spare value between calls, so the engine state alone is the full state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform double in [0, 1).
  double uniform();
  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  /// Standard normal tensor of the given shape.
  torch::Tensor normal(torch::IntArrayRef shape, torch::Dtype dtype = torch::kFloat32);

  std::string state() const;
  void set_state(const std::string& s);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer; used to derive independent sub-seeds from one seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return mix_seed(a ^ mix_seed(b + 0x632BE59BD9B4E019ULL));
}

}  // namespace diffsat
