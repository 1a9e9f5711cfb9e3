#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

namespace diffsat {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  bool operator==(const AdamWOptions&) const = default;
};

/// AdamW over a fixed, named parameter list, backed by the fused CPU kernel.
///
/// State tensors are plain members so checkpoints can store and restore them
/// by parameter name.
class AdamW {
 public:
  AdamW(std::vector<std::string> names, std::vector<torch::Tensor> params, AdamWOptions opts);

  void zero_grad();
  /// Parameters without a gradient are skipped (their state does not advance).
  void step();

  const AdamWOptions& options() const { return opts_; }
  void set_lr(double lr) { opts_.lr = lr; }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<torch::Tensor>& params() const { return params_; }
  std::vector<torch::Tensor>& exp_avg() { return exp_avg_; }
  std::vector<torch::Tensor>& exp_avg_sq() { return exp_avg_sq_; }
  std::vector<torch::Tensor>& steps() { return steps_; }

 private:
  std::vector<std::string> names_;
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> exp_avg_, exp_avg_sq_, steps_;
  AdamWOptions opts_;
};

/// Global L2 norm of all gradients; scales them down to `max_norm` when larger.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm);

}  // namespace diffsat
